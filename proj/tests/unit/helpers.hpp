#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "cpf/autodiff.hpp"
#include "cpf/rng.hpp"

namespace testing {

inline cpf::Tensor random_tensor(std::size_t r, std::size_t c, cpf::Rng& rng, double scale = 1.0) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = scale * rng.normal();
  return cpf::Tensor::from(r, c, std::move(v));
}

inline cpf::Tensor random_parameter(std::size_t r, std::size_t c, cpf::Rng& rng, double scale = 1.0) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = scale * rng.normal();
  return cpf::Tensor::parameter(r, c, std::move(v));
}

inline double max_abs_diff(const cpf::Tensor& a, const cpf::Tensor& b) {
  double m = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("cpf_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace testing
