#pragma once

// Discrete normalizing flows with exact log-determinants.
//
// Direction convention: forward() maps latent -> data (x = F(z; cond)) and
// returns log|det dx/dz|; inverse() maps data -> latent and returns
// log|det dz/dx|, the term that enters the log-likelihood.

#include <memory>
#include <string>
#include <vector>

#include "cpf/autodiff.hpp"
#include "cpf/layers.hpp"
#include "cpf/rng.hpp"

namespace cpf {

struct FlowResult {
  Tensor value;
  Tensor logdet;  // rows x 1
};

// Conditional invertible map over row vectors.
class Bijection {
 public:
  virtual ~Bijection() = default;
  virtual FlowResult forward(const Tensor& z, const Tensor& cond) = 0;
  virtual FlowResult inverse(const Tensor& x, const Tensor& cond) = 0;
  virtual void collect(ParamList& out, const std::string& prefix) const = 0;
  virtual void set_training(bool training) = 0;
  virtual std::size_t dim() const = 0;
  virtual std::size_t cond_dim() const = 0;
};

class FlowBlock {
 public:
  virtual ~FlowBlock() = default;
  virtual std::string kind() const = 0;
  virtual FlowResult forward(const Tensor& z, const Tensor& cond) = 0;
  virtual FlowResult inverse(const Tensor& x, const Tensor& cond) = 0;
  virtual void collect(ParamList& out, const std::string& prefix) const = 0;
  virtual void set_training(bool) {}
};

// x = s * z + b per dimension, s = exp(log_scale).
class ActNorm : public FlowBlock {
 public:
  explicit ActNorm(std::size_t dim);

  std::string kind() const override { return "actnorm"; }
  FlowResult forward(const Tensor& z, const Tensor& cond) override;
  FlowResult inverse(const Tensor& x, const Tensor& cond) override;
  void collect(ParamList& out, const std::string& prefix) const override;

  // Sets b = mean(x) and s = std(x) so that the data-side batch `x` leaves
  // the inverse with zero mean and unit variance per dimension.
  void initialize_from(const Tensor& x);
  void set_scale(const std::vector<double>& s);
  void set_bias(const std::vector<double>& b);
  std::vector<double> scale() const;
  // 1 / s: the multiplier applied when normalizing data.
  std::vector<double> normalizing_scale() const;
  std::vector<double> bias() const;

 private:
  std::size_t dim_;
  Tensor log_scale_, bias_;
};

// x = W z with W = P (L + I) (U + diag(sign * exp(log_diag))). P and sign are
// fixed at construction; L strictly lower, U strictly upper.
class InvertibleLinear : public FlowBlock {
 public:
  // Starts from a random rotation decomposed by pivoted LU.
  InvertibleLinear(std::size_t dim, Rng& rng);

  std::string kind() const override { return "invertible-linear"; }
  FlowResult forward(const Tensor& z, const Tensor& cond) override;
  FlowResult inverse(const Tensor& x, const Tensor& cond) override;
  void collect(ParamList& out, const std::string& prefix) const override;

  Tensor weight() const;
  Tensor inverse_matrix() const;
  // Resets to P = L = U = identity-structure with the given diagonal logs.
  void set_identity(const std::vector<double>& log_diag);

 private:
  std::size_t dim_;
  Tensor perm_, sign_, lower_, upper_, log_diag_;
  Tensor lower_mask_, upper_mask_;
};

// Autoregressive affine map in fixed coordinate order. Coordinate i gets
// shift t_i and pre-scale a_i from a concatsquash stack fed z_{<i} and the
// condition; x_i = z_i * exp(s_max * tanh(a_i)) + t_i.
class AutoregressiveAffine : public FlowBlock {
 public:
  static constexpr double kMaxLogScale = 5.0;

  AutoregressiveAffine(std::size_t dim, std::size_t cond_dim, std::size_t hidden, Rng& rng);

  std::string kind() const override { return "autoregressive-affine"; }
  FlowResult forward(const Tensor& z, const Tensor& cond) override;
  FlowResult inverse(const Tensor& x, const Tensor& cond) override;
  void collect(ParamList& out, const std::string& prefix) const override;

 private:
  struct Net {
    ConcatSquash l1, l2, l3;
  };
  std::pair<Tensor, Tensor> shift_and_log_scale(std::size_t i, const Tensor& prefix, const Tensor& cond) const;

  std::size_t dim_, cond_dim_;
  std::vector<Net> nets_;
};

// Affine map through running statistics (a "moving" batch normalization):
// inverse normalizes, forward restores. Statistics update only on inverse
// calls in training mode.
class RunningNormBlock : public FlowBlock {
 public:
  explicit RunningNormBlock(std::size_t dim);

  std::string kind() const override { return "running-norm"; }
  FlowResult forward(const Tensor& z, const Tensor& cond) override;
  FlowResult inverse(const Tensor& x, const Tensor& cond) override;
  void collect(ParamList& out, const std::string& prefix) const override;
  void set_training(bool training) override { training_ = training; }

 private:
  RunningStats stats_;
  bool training_ = false;
};

// Ordered blocks, listed in latent -> data order.
class FlowStack : public Bijection {
 public:
  FlowStack(std::size_t dim, std::size_t cond_dim);

  void add(std::unique_ptr<FlowBlock> block);
  FlowResult forward(const Tensor& z, const Tensor& cond) override;
  FlowResult inverse(const Tensor& x, const Tensor& cond) override;
  void collect(ParamList& out, const std::string& prefix) const override;
  void set_training(bool training) override;
  std::size_t dim() const override { return dim_; }
  std::size_t cond_dim() const override { return cond_dim_; }

  std::size_t size() const { return blocks_.size(); }
  FlowBlock& block(std::size_t i) { return *blocks_[i]; }
  // Per-block inverse log-dets in the order the inverse visits them.
  std::vector<Tensor> inverse_block_logdets(const Tensor& x, const Tensor& cond);

  bool actnorm_initialized() const { return init_flag_.values()[0] != 0.0; }
  void actnorm_init(const Tensor& x, const Tensor& cond);

 private:
  void check_inputs(const Tensor& v, const Tensor& cond, const char* op) const;

  std::size_t dim_, cond_dim_;
  std::vector<std::unique_ptr<FlowBlock>> blocks_;
  Tensor init_flag_;
};

// Point generator: `blocks` x [autoregressive, invertible-linear, actnorm].
std::unique_ptr<FlowStack> make_point_flow(std::size_t dim, std::size_t cond_dim, std::size_t blocks,
                                           std::size_t hidden, Rng& rng);
// Prior flow: running-norm, then `blocks` x [autoregressive,
// invertible-linear, running-norm].
std::unique_ptr<FlowStack> make_prior_flow(std::size_t dim, std::size_t blocks, std::size_t hidden, Rng& rng);

// log N(z; 0, I) per row.
Tensor standard_normal_logpdf(const Tensor& z);

Tensor flow_forward(const Tensor& z, const Tensor& cond, Bijection& flow);
FlowResult flow_inverse_logdet(const Tensor& x, const Tensor& cond, Bijection& flow);
// log p(z) + log|det dF^-1/dx| per row.
Tensor log_likelihood(const Tensor& x, const Tensor& cond, Bijection& flow);
void actnorm_init(FlowStack& stack, const Tensor& x, const Tensor& cond);

}  // namespace cpf
