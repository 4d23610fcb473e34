#pragma once

// Continuous normalizing flow: dh/dt = g(h, t; cond) integrated with
// fixed-step RK4, with the Jacobian trace integrated alongside the state.

#include <memory>
#include <string>
#include <vector>

#include "cpf/flow.hpp"

namespace cpf {

class VectorField {
 public:
  virtual ~VectorField() = default;
  virtual std::size_t dim() const = 0;
  virtual std::size_t cond_dim() const = 0;
  virtual Tensor value(const Tensor& h, double t, const Tensor& cond) const = 0;
  // g(h) together with J_g(h) v for each tangent v (same shape as h).
  virtual std::pair<Tensor, std::vector<Tensor>> value_and_jvp(const Tensor& h, double t, const Tensor& cond,
                                                               const std::vector<Tensor>& tangents) const = 0;
  virtual void collect(ParamList& out, const std::string& prefix) const = 0;
};

// Three concatsquash layers conditioned on [t, cond], tanh after the first two.
class ConcatSquashField : public VectorField {
 public:
  ConcatSquashField(std::size_t dim, std::size_t hidden, std::size_t cond_dim, Rng& rng);

  std::size_t dim() const override { return dim_; }
  std::size_t cond_dim() const override { return cond_dim_; }
  Tensor value(const Tensor& h, double t, const Tensor& cond) const override;
  std::pair<Tensor, std::vector<Tensor>> value_and_jvp(const Tensor& h, double t, const Tensor& cond,
                                                       const std::vector<Tensor>& tangents) const override;
  void collect(ParamList& out, const std::string& prefix) const override;

 private:
  Tensor condition(std::size_t rows, double t, const Tensor& cond) const;

  std::size_t dim_, cond_dim_;
  ConcatSquash l1_, l2_, l3_;
};

// g(h) = h A^T, time independent. Useful for analytic checks.
class LinearField : public VectorField {
 public:
  LinearField(std::size_t dim, std::vector<double> a);

  std::size_t dim() const override { return dim_; }
  std::size_t cond_dim() const override { return 0; }
  Tensor value(const Tensor& h, double t, const Tensor& cond) const override;
  std::pair<Tensor, std::vector<Tensor>> value_and_jvp(const Tensor& h, double t, const Tensor& cond,
                                                       const std::vector<Tensor>& tangents) const override;
  void collect(ParamList& out, const std::string& prefix) const override;

 private:
  std::size_t dim_;
  Tensor a_;
};

enum class TraceMode { exact, hutchinson };

struct CnfOptions {
  std::size_t steps = 20;
  double t0 = 0.0;
  double t1 = 1.0;
  TraceMode trace = TraceMode::exact;
};

// Per-row Jacobian trace of the field at (h, t): exact via d unit-tangent
// JVPs, or one Hutchinson probe eps^T J eps with Rademacher eps.
Tensor field_trace(const VectorField& field, const Tensor& h, double t, const Tensor& cond, TraceMode mode,
                   Rng& rng);

class CnfBackend : public Bijection {
 public:
  CnfBackend(std::unique_ptr<VectorField> field, CnfOptions options, std::uint64_t seed);

  // Integrates t0 -> t1; logdet = integral of tr J.
  FlowResult forward(const Tensor& z, const Tensor& cond) override;
  // Integrates t1 -> t0; logdet is the signed integral, -integral of tr J.
  FlowResult inverse(const Tensor& x, const Tensor& cond) override;
  void collect(ParamList& out, const std::string& prefix) const override;
  void set_training(bool) override {}
  std::size_t dim() const override { return field_->dim(); }
  std::size_t cond_dim() const override { return field_->cond_dim(); }

  const CnfOptions& options() const { return options_; }
  VectorField& field() { return *field_; }

 private:
  FlowResult integrate(const Tensor& start, const Tensor& cond, double from, double to);

  std::unique_ptr<VectorField> field_;
  CnfOptions options_;
  Rng rng_;
};

// Reverse-integrates x to z and returns log N(z) + log|det dz/dx| per row.
FlowResult cnf_logdensity(const Tensor& x, const Tensor& cond, CnfBackend& backend);

}  // namespace cpf
