#pragma once

// Flat `key = value` configuration with '#' comments. Unknown keys are
// errors and come with a spelling suggestion.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cpf/data.hpp"
#include "cpf/model.hpp"
#include "cpf/trainer.hpp"

namespace cpf {

// Bad invocation or configuration (exit code 2).
class UsageError : public Error {
 public:
  using Error::Error;
};

class Config {
 public:
  // Every known key with its default value.
  static Config defaults();
  static const std::vector<std::string>& keys();

  // Applies `key = value` lines; later lines win.
  void parse(const std::string& text, const std::string& source = "<config>");
  void load_file(const std::filesystem::path& path);
  // "key=value" override.
  void set_assignment(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  std::size_t get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  SyntheticSpec dataset_spec() const;

 private:
  std::map<std::string, std::string> values_;
};

// Closest known key by edit distance, or empty if nothing is close.
std::string suggest_key(const std::string& unknown);
std::size_t edit_distance(const std::string& a, const std::string& b);

}  // namespace cpf
