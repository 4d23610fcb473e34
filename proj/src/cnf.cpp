#include "cpf/cnf.hpp"

namespace cpf {

namespace {

Tensor one_minus_square(const Tensor& a) { return add_scalar(neg(square(a)), 1.0); }

// Sum over columns of a * b: rows x 1.
Tensor row_dot(const Tensor& a, const Tensor& b) { return sum_axis(mul(a, b), 1); }

}  // namespace

ConcatSquashField::ConcatSquashField(std::size_t dim, std::size_t hidden, std::size_t cond_dim, Rng& rng)
    : dim_(dim),
      cond_dim_(cond_dim),
      l1_(dim, hidden, cond_dim + 1, rng),
      l2_(hidden, hidden, cond_dim + 1, rng),
      l3_(hidden, dim, cond_dim + 1, rng) {}

Tensor ConcatSquashField::condition(std::size_t rows, double t, const Tensor& cond) const {
  Tensor tc = Tensor::full(rows, 1, t);
  if (cond_dim_ == 0) return tc;
  if (!cond.defined() || cond.cols() != cond_dim_ || cond.rows() != rows)
    throw ShapeError("cnf: condition shape does not match field");
  return concat_cols(tc, cond);
}

Tensor ConcatSquashField::value(const Tensor& h, double t, const Tensor& cond) const {
  Tensor xi = condition(h.rows(), t, cond);
  Tensor a = tanh(l1_.forward(h, xi));
  a = tanh(l2_.forward(a, xi));
  return l3_.forward(a, xi);
}

std::pair<Tensor, std::vector<Tensor>> ConcatSquashField::value_and_jvp(const Tensor& h, double t,
                                                                        const Tensor& cond,
                                                                        const std::vector<Tensor>& tangents) const {
  Tensor xi = condition(h.rows(), t, cond);
  Tensor a1 = tanh(l1_.forward(h, xi));
  Tensor a2 = tanh(l2_.forward(a1, xi));
  Tensor out = l3_.forward(a2, xi);
  Tensor g1 = l1_.gate(xi), g2 = l2_.gate(xi), g3 = l3_.gate(xi);
  Tensor d1 = one_minus_square(a1), d2 = one_minus_square(a2);
  std::vector<Tensor> jv;
  for (const Tensor& v : tangents) {
    Tensor u = mul(mul(l1_.input_jvp(v), g1), d1);
    u = mul(mul(l2_.input_jvp(u), g2), d2);
    jv.push_back(mul(l3_.input_jvp(u), g3));
  }
  return {out, jv};
}

void ConcatSquashField::collect(ParamList& out, const std::string& prefix) const {
  l1_.collect(out, prefix + ".cs0");
  l2_.collect(out, prefix + ".cs1");
  l3_.collect(out, prefix + ".cs2");
}

LinearField::LinearField(std::size_t dim, std::vector<double> a)
    : dim_(dim), a_(Tensor::parameter(dim, dim, std::move(a))) {}

Tensor LinearField::value(const Tensor& h, double, const Tensor&) const { return matmul(h, transpose(a_)); }

std::pair<Tensor, std::vector<Tensor>> LinearField::value_and_jvp(const Tensor& h, double, const Tensor&,
                                                                  const std::vector<Tensor>& tangents) const {
  Tensor at = transpose(a_);
  std::vector<Tensor> jv;
  for (const Tensor& v : tangents) jv.push_back(matmul(v, at));
  return {matmul(h, at), jv};
}

void LinearField::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".a", a_, true});
}

namespace {

std::vector<Tensor> unit_tangents(std::size_t rows, std::size_t dim) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < dim; ++k) {
    Tensor e = Tensor::zeros(rows, dim);
    auto v = e.mutable_values();
    for (std::size_t r = 0; r < rows; ++r) v[r * dim + k] = 1.0;
    out.push_back(e);
  }
  return out;
}

Tensor rademacher_probe(std::size_t rows, std::size_t dim, Rng& rng) {
  Tensor e = Tensor::zeros(rows, dim);
  for (double& v : e.mutable_values()) v = rng.rademacher();
  return e;
}

// Field value and trace estimate. For exact mode `probe` is ignored.
std::pair<Tensor, Tensor> value_and_trace(const VectorField& field, const Tensor& h, double t, const Tensor& cond,
                                          TraceMode mode, const Tensor& probe) {
  const std::size_t d = field.dim();
  if (mode == TraceMode::exact) {
    auto [g, jv] = field.value_and_jvp(h, t, cond, unit_tangents(h.rows(), d));
    Tensor tr;
    for (std::size_t k = 0; k < d; ++k) {
      Tensor diag = slice_cols(jv[k], k, k + 1);
      tr = tr.defined() ? add(tr, diag) : diag;
    }
    return {g, tr};
  }
  auto [g, jv] = field.value_and_jvp(h, t, cond, {probe});
  return {g, row_dot(probe, jv[0])};
}

}  // namespace

Tensor field_trace(const VectorField& field, const Tensor& h, double t, const Tensor& cond, TraceMode mode,
                   Rng& rng) {
  Tensor probe;
  if (mode == TraceMode::hutchinson) probe = rademacher_probe(h.rows(), field.dim(), rng);
  return value_and_trace(field, h, t, cond, mode, probe).second;
}

CnfBackend::CnfBackend(std::unique_ptr<VectorField> field, CnfOptions options, std::uint64_t seed)
    : field_(std::move(field)), options_(options), rng_(seed) {
  if (options_.steps < 4) throw Error("cnf: step count must be at least 4, got " + std::to_string(options_.steps));
  if (options_.trace == TraceMode::exact && field_->dim() > 16)
    throw Error("cnf: exact trace supports dimension <= 16");
}

FlowResult CnfBackend::integrate(const Tensor& start, const Tensor& cond, double from, double to) {
  if (start.cols() != field_->dim())
    throw ShapeError("cnf: input has " + std::to_string(start.cols()) + " columns, field dimension is " +
                     std::to_string(field_->dim()));
  if (!start.all_finite()) throw NumericError("cnf: non-finite input");
  Tensor probe;
  if (options_.trace == TraceMode::hutchinson) probe = rademacher_probe(start.rows(), field_->dim(), rng_);
  const auto n = options_.steps;
  const double dt = (to - from) / static_cast<double>(n);
  Tensor h = start;
  Tensor ell = Tensor::zeros(start.rows(), 1);
  auto f = [&](const Tensor& state, double t) {
    return value_and_trace(*field_, state, t, cond, options_.trace, probe);
  };
  for (std::size_t i = 0; i < n; ++i) {
    const double t = from + dt * static_cast<double>(i);
    auto [k1, q1] = f(h, t);
    auto [k2, q2] = f(add(h, scale(k1, dt / 2)), t + dt / 2);
    auto [k3, q3] = f(add(h, scale(k2, dt / 2)), t + dt / 2);
    auto [k4, q4] = f(add(h, scale(k3, dt)), t + dt);
    h = add(h, scale(add(add(k1, k4), scale(add(k2, k3), 2.0)), dt / 6));
    ell = add(ell, scale(add(add(q1, q4), scale(add(q2, q3), 2.0)), dt / 6));
  }
  if (!h.all_finite()) throw NumericError("cnf: non-finite state after integration");
  return {h, ell};
}

FlowResult CnfBackend::forward(const Tensor& z, const Tensor& cond) {
  return integrate(z, cond, options_.t0, options_.t1);
}

FlowResult CnfBackend::inverse(const Tensor& x, const Tensor& cond) {
  return integrate(x, cond, options_.t1, options_.t0);
}

void CnfBackend::collect(ParamList& out, const std::string& prefix) const { field_->collect(out, prefix + ".field"); }

FlowResult cnf_logdensity(const Tensor& x, const Tensor& cond, CnfBackend& backend) {
  FlowResult r = backend.inverse(x, cond);
  return {r.value, add(standard_normal_logpdf(r.value), r.logdet)};
}

}  // namespace cpf
