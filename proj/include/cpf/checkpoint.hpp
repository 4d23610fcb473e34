#pragma once

// Binary checkpoints: "CPF1", u32 format version, a key/value
// hyperparameter block, then named tensors (u32 name length, name, u8
// trainable flag, u32 rows, u32 cols, little-endian f64 values).

#include <filesystem>
#include <map>
#include <string>

#include "cpf/layers.hpp"

namespace cpf {

constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> hyper;
  ParamList tensors;

  const NamedTensor* find(const std::string& name) const;
};

// Writes to a temporary file and renames, so a crash never leaves a torn file.
void save_checkpoint(const std::filesystem::path& path, const std::map<std::string, std::string>& hyper,
                     const ParamList& tensors);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies stored values into `target` by name. Missing names or shape
// mismatches are errors.
void restore_tensors(const ParamList& target, const Checkpoint& ckpt);

}  // namespace cpf
