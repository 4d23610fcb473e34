#pragma once

#include <cstdint>
#include <random>

namespace cpf {

// Deterministic random source used throughout the repository.
//
// Engine: std::mt19937_64 (bit-exact by the C++ standard). Variates are
// derived here rather than through <random> distributions, whose outputs are
// implementation-defined:
//   uniform   53 high bits of one draw, mapped into (0, 1)
//   normal    Box-Muller on two uniforms, cosine branch only
//   gumbel    -log(-log(u)) with u clamped into [1e-12, 1 - 1e-12]
//   rademacher  sign from the top bit of one draw
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  double uniform();
  double normal();
  double gumbel();
  double rademacher();
  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  // Independent stream derived from (seed, stream id) through splitmix64.
  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace cpf
