#include "cpf/flow.hpp"

#include <cmath>
#include <numbers>

namespace cpf {

namespace {

Tensor rows_of(const Tensor& scalar, std::size_t rows) { return repeat_rows(scalar, rows); }

}  // namespace

// ---- ActNorm --------------------------------------------------------------

ActNorm::ActNorm(std::size_t dim)
    : dim_(dim), log_scale_(Tensor::parameter(1, dim, std::vector<double>(dim, 0.0))),
      bias_(Tensor::parameter(1, dim, std::vector<double>(dim, 0.0))) {}

FlowResult ActNorm::forward(const Tensor& z, const Tensor&) {
  Tensor x = add(mul(z, exp(log_scale_)), bias_);
  return {x, rows_of(sum(log_scale_), z.rows())};
}

FlowResult ActNorm::inverse(const Tensor& x, const Tensor&) {
  Tensor z = mul(sub(x, bias_), exp(neg(log_scale_)));
  return {z, rows_of(neg(sum(log_scale_)), x.rows())};
}

void ActNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".log_scale", log_scale_, true});
  out.push_back({prefix + ".bias", bias_, true});
}

void ActNorm::initialize_from(const Tensor& x) {
  const std::size_t r = x.rows();
  if (r == 0 || x.cols() != dim_) throw ShapeError("actnorm_init: batch shape " + to_string(x.shape()));
  auto v = x.values();
  auto ls = log_scale_.mutable_values();
  auto b = bias_.mutable_values();
  for (std::size_t j = 0; j < dim_; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < r; ++i) m += v[i * dim_ + j];
    m /= static_cast<double>(r);
    double var = 0.0;
    for (std::size_t i = 0; i < r; ++i) var += (v[i * dim_ + j] - m) * (v[i * dim_ + j] - m);
    var /= static_cast<double>(r);
    const double sd = var > 0.0 ? std::sqrt(var) : 1.0;
    b[j] = m;
    ls[j] = std::log(sd);
  }
}

void ActNorm::set_scale(const std::vector<double>& s) {
  auto ls = log_scale_.mutable_values();
  for (std::size_t j = 0; j < dim_; ++j) ls[j] = std::log(s.at(j));
}

void ActNorm::set_bias(const std::vector<double>& b) {
  auto bv = bias_.mutable_values();
  for (std::size_t j = 0; j < dim_; ++j) bv[j] = b.at(j);
}

std::vector<double> ActNorm::scale() const {
  std::vector<double> s;
  for (double v : log_scale_.values()) s.push_back(std::exp(v));
  return s;
}

std::vector<double> ActNorm::normalizing_scale() const {
  std::vector<double> s;
  for (double v : log_scale_.values()) s.push_back(std::exp(-v));
  return s;
}

std::vector<double> ActNorm::bias() const { return {bias_.values().begin(), bias_.values().end()}; }

// ---- InvertibleLinear -----------------------------------------------------

InvertibleLinear::InvertibleLinear(std::size_t dim, Rng& rng) : dim_(dim) {
  const std::size_t d = dim;
  // Random rotation: modified Gram-Schmidt on a Gaussian matrix.
  std::vector<double> q(d * d);
  for (double& v : q) v = rng.normal();
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (std::size_t r = 0; r < d; ++r) dot += q[r * d + c] * q[r * d + p];
      for (std::size_t r = 0; r < d; ++r) q[r * d + c] -= dot * q[r * d + p];
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < d; ++r) norm += q[r * d + c] * q[r * d + c];
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < d; ++r) q[r * d + c] /= norm;
  }
  // Pivoted LU: (row piv[i] of Q) = (L U)[i].
  std::vector<double> a = q;
  std::vector<std::size_t> piv(d);
  for (std::size_t i = 0; i < d; ++i) piv[i] = i;
  std::vector<double> lower(d * d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < d; ++i)
      if (std::abs(a[i * d + k]) > std::abs(a[p * d + k])) p = i;
    if (p != k) {
      for (std::size_t j = 0; j < d; ++j) {
        std::swap(a[p * d + j], a[k * d + j]);
        std::swap(lower[p * d + j], lower[k * d + j]);
      }
      std::swap(piv[p], piv[k]);
    }
    for (std::size_t i = k + 1; i < d; ++i) {
      const double f = a[i * d + k] / a[k * d + k];
      lower[i * d + k] = f;
      for (std::size_t j = k; j < d; ++j) a[i * d + j] -= f * a[k * d + j];
    }
  }
  std::vector<double> perm(d * d, 0.0), sign(d), log_diag(d), upper(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) perm[piv[i] * d + i] = 1.0;
  for (std::size_t i = 0; i < d; ++i) {
    sign[i] = a[i * d + i] < 0 ? -1.0 : 1.0;
    log_diag[i] = std::log(std::abs(a[i * d + i]));
    for (std::size_t j = i + 1; j < d; ++j) upper[i * d + j] = a[i * d + j];
  }
  std::vector<double> lmask(d * d, 0.0), umask(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      if (j < i) lmask[i * d + j] = 1.0;
      if (j > i) umask[i * d + j] = 1.0;
    }
  perm_ = Tensor::from(d, d, perm);
  sign_ = Tensor::from(1, d, sign);
  lower_ = Tensor::parameter(d, d, lower);
  upper_ = Tensor::parameter(d, d, upper);
  log_diag_ = Tensor::parameter(1, d, log_diag);
  lower_mask_ = Tensor::from(d, d, lmask);
  upper_mask_ = Tensor::from(d, d, umask);
}

Tensor InvertibleLinear::weight() const {
  const Tensor eye = Tensor::identity(dim_);
  Tensor l = add(mul(lower_, lower_mask_), eye);
  Tensor diag = mul(eye, mul(sign_, exp(log_diag_)));
  Tensor u = add(mul(upper_, upper_mask_), diag);
  return matmul(perm_, matmul(l, u));
}

FlowResult InvertibleLinear::forward(const Tensor& z, const Tensor&) {
  Tensor x = matmul(z, transpose(weight()));
  return {x, rows_of(sum(log_diag_), z.rows())};
}

FlowResult InvertibleLinear::inverse(const Tensor& x, const Tensor&) {
  Tensor z = matmul(x, transpose(inverse_matrix()));
  return {z, rows_of(neg(sum(log_diag_)), x.rows())};
}

Tensor InvertibleLinear::inverse_matrix() const { return cpf::inverse(weight()); }

void InvertibleLinear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".permutation", perm_, false});
  out.push_back({prefix + ".sign", sign_, false});
  out.push_back({prefix + ".lower", lower_, true});
  out.push_back({prefix + ".upper", upper_, true});
  out.push_back({prefix + ".log_diag", log_diag_, true});
}

void InvertibleLinear::set_identity(const std::vector<double>& log_diag) {
  const std::size_t d = dim_;
  auto p = perm_.mutable_values();
  for (std::size_t i = 0; i < d * d; ++i) p[i] = (i % (d + 1) == 0) ? 1.0 : 0.0;
  for (double& v : sign_.mutable_values()) v = 1.0;
  for (double& v : lower_.mutable_values()) v = 0.0;
  for (double& v : upper_.mutable_values()) v = 0.0;
  auto ld = log_diag_.mutable_values();
  for (std::size_t i = 0; i < d; ++i) ld[i] = log_diag.at(i);
}

// ---- AutoregressiveAffine -------------------------------------------------

AutoregressiveAffine::AutoregressiveAffine(std::size_t dim, std::size_t cond_dim, std::size_t hidden, Rng& rng)
    : dim_(dim), cond_dim_(cond_dim) {
  for (std::size_t i = 0; i < dim; ++i) {
    Net net{ConcatSquash(i, hidden, cond_dim, rng), ConcatSquash(hidden, hidden, cond_dim, rng),
            ConcatSquash(hidden, 2, cond_dim, rng)};
    // Zero output layer: the block starts as the identity.
    ParamList last;
    net.l3.collect(last, "");
    zero_parameters(last);
    nets_.push_back(std::move(net));
  }
}

std::pair<Tensor, Tensor> AutoregressiveAffine::shift_and_log_scale(std::size_t i, const Tensor& prefix,
                                                                    const Tensor& cond) const {
  const Net& net = nets_[i];
  Tensor h = tanh(net.l1.forward(prefix, cond));
  h = tanh(net.l2.forward(h, cond));
  Tensor o = net.l3.forward(h, cond);
  Tensor shift = slice_cols(o, 0, 1);
  Tensor log_scale = scale(tanh(slice_cols(o, 1, 2)), kMaxLogScale);
  return {shift, log_scale};
}

FlowResult AutoregressiveAffine::forward(const Tensor& z, const Tensor& cond) {
  std::vector<Tensor> xs;
  Tensor logdet;
  for (std::size_t i = 0; i < dim_; ++i) {
    auto [shift, log_scale] = shift_and_log_scale(i, slice_cols(z, 0, i), cond);
    xs.push_back(add(mul(slice_cols(z, i, i + 1), exp(log_scale)), shift));
    logdet = logdet.defined() ? add(logdet, log_scale) : log_scale;
  }
  return {concat_cols(xs), logdet};
}

FlowResult AutoregressiveAffine::inverse(const Tensor& x, const Tensor& cond) {
  std::vector<Tensor> zs;
  Tensor prefix = Tensor::zeros(x.rows(), 0);
  Tensor logdet;
  for (std::size_t i = 0; i < dim_; ++i) {
    auto [shift, log_scale] = shift_and_log_scale(i, prefix, cond);
    zs.push_back(mul(sub(slice_cols(x, i, i + 1), shift), exp(neg(log_scale))));
    logdet = logdet.defined() ? sub(logdet, log_scale) : neg(log_scale);
    if (i + 1 < dim_) prefix = concat_cols(zs);
  }
  return {concat_cols(zs), logdet};
}

void AutoregressiveAffine::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < nets_.size(); ++i) {
    const std::string p = prefix + ".coord" + std::to_string(i);
    nets_[i].l1.collect(out, p + ".cs0");
    nets_[i].l2.collect(out, p + ".cs1");
    nets_[i].l3.collect(out, p + ".cs2");
  }
}

// ---- RunningNormBlock -----------------------------------------------------

RunningNormBlock::RunningNormBlock(std::size_t dim) : stats_(dim) {}

FlowResult RunningNormBlock::forward(const Tensor& z, const Tensor&) {
  return {stats_.denormalize(z), Tensor::full(z.rows(), 1, stats_.log_scale())};
}

FlowResult RunningNormBlock::inverse(const Tensor& x, const Tensor&) {
  if (training_) stats_.update(x);
  return {stats_.normalize(x), Tensor::full(x.rows(), 1, -stats_.log_scale())};
}

void RunningNormBlock::collect(ParamList& out, const std::string& prefix) const { stats_.collect(out, prefix); }

// ---- FlowStack ------------------------------------------------------------

FlowStack::FlowStack(std::size_t dim, std::size_t cond_dim)
    : dim_(dim), cond_dim_(cond_dim), init_flag_(Tensor::zeros(1, 1)) {}

void FlowStack::add(std::unique_ptr<FlowBlock> block) { blocks_.push_back(std::move(block)); }

void FlowStack::check_inputs(const Tensor& v, const Tensor& cond, const char* op) const {
  for (double x : v.values())
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  if (v.cols() != dim_)
    throw ShapeError(std::string(op) + ": input has " + std::to_string(v.cols()) + " columns, flow dimension is " +
                     std::to_string(dim_));
  if (cond_dim_ > 0) {
    if (!cond.defined() || cond.cols() != cond_dim_ || cond.rows() != v.rows())
      throw ShapeError(std::string(op) + ": condition shape " + (cond.defined() ? to_string(cond.shape()) : "none") +
                       " does not match (" + std::to_string(v.rows()) + "x" + std::to_string(cond_dim_) + ")");
  }
}

FlowResult FlowStack::forward(const Tensor& z, const Tensor& cond) {
  check_inputs(z, cond, "flow_forward");
  Tensor h = z;
  Tensor logdet = Tensor::zeros(z.rows(), 1);
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    FlowResult r = blocks_[k]->forward(h, cond);
    if (!r.value.all_finite())
      throw NumericError("flow_forward: non-finite output from block " + std::to_string(k) + " (" +
                         blocks_[k]->kind() + ")");
    h = r.value;
    logdet = cpf::add(logdet, r.logdet);
  }
  return {h, logdet};
}

FlowResult FlowStack::inverse(const Tensor& x, const Tensor& cond) {
  check_inputs(x, cond, "flow_inverse");
  Tensor h = x;
  Tensor logdet = Tensor::zeros(x.rows(), 1);
  for (std::size_t k = blocks_.size(); k-- > 0;) {
    FlowResult r = blocks_[k]->inverse(h, cond);
    if (!r.value.all_finite())
      throw NumericError("flow_inverse: non-finite output from block " + std::to_string(k) + " (" +
                         blocks_[k]->kind() + ")");
    h = r.value;
    logdet = cpf::add(logdet, r.logdet);
  }
  return {h, logdet};
}

std::vector<Tensor> FlowStack::inverse_block_logdets(const Tensor& x, const Tensor& cond) {
  check_inputs(x, cond, "flow_inverse");
  std::vector<Tensor> out;
  Tensor h = x;
  for (std::size_t k = blocks_.size(); k-- > 0;) {
    FlowResult r = blocks_[k]->inverse(h, cond);
    h = r.value;
    out.push_back(r.logdet);
  }
  return out;
}

void FlowStack::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t k = 0; k < blocks_.size(); ++k)
    blocks_[k]->collect(out, prefix + ".block" + std::to_string(k));
  out.push_back({prefix + ".actnorm_initialized", init_flag_, false});
}

void FlowStack::set_training(bool training) {
  for (auto& b : blocks_) b->set_training(training);
}

void FlowStack::actnorm_init(const Tensor& x, const Tensor& cond) {
  if (actnorm_initialized()) throw Error("actnorm_init: flow already initialized");
  check_inputs(x, cond, "actnorm_init");
  NoGradScope no_grad;
  Tensor h = x;
  for (std::size_t k = blocks_.size(); k-- > 0;) {
    if (auto* an = dynamic_cast<ActNorm*>(blocks_[k].get())) an->initialize_from(h);
    h = blocks_[k]->inverse(h, cond).value;
  }
  init_flag_.mutable_values()[0] = 1.0;
}

std::unique_ptr<FlowStack> make_point_flow(std::size_t dim, std::size_t cond_dim, std::size_t blocks,
                                           std::size_t hidden, Rng& rng) {
  auto stack = std::make_unique<FlowStack>(dim, cond_dim);
  for (std::size_t b = 0; b < blocks; ++b) {
    stack->add(std::make_unique<AutoregressiveAffine>(dim, cond_dim, hidden, rng));
    stack->add(std::make_unique<InvertibleLinear>(dim, rng));
    stack->add(std::make_unique<ActNorm>(dim));
  }
  return stack;
}

std::unique_ptr<FlowStack> make_prior_flow(std::size_t dim, std::size_t blocks, std::size_t hidden, Rng& rng) {
  auto stack = std::make_unique<FlowStack>(dim, 0);
  stack->add(std::make_unique<RunningNormBlock>(dim));
  for (std::size_t b = 0; b < blocks; ++b) {
    stack->add(std::make_unique<AutoregressiveAffine>(dim, 0, hidden, rng));
    stack->add(std::make_unique<InvertibleLinear>(dim, rng));
    stack->add(std::make_unique<RunningNormBlock>(dim));
  }
  return stack;
}

// ---- free functions -------------------------------------------------------

Tensor standard_normal_logpdf(const Tensor& z) {
  const double c = -0.5 * static_cast<double>(z.cols()) * std::log(2.0 * std::numbers::pi);
  return add_scalar(scale(sum_axis(square(z), 1), -0.5), c);
}

Tensor flow_forward(const Tensor& z, const Tensor& cond, Bijection& flow) { return flow.forward(z, cond).value; }

FlowResult flow_inverse_logdet(const Tensor& x, const Tensor& cond, Bijection& flow) {
  return flow.inverse(x, cond);
}

Tensor log_likelihood(const Tensor& x, const Tensor& cond, Bijection& flow) {
  FlowResult r = flow.inverse(x, cond);
  return add(standard_normal_logpdf(r.value), r.logdet);
}

void actnorm_init(FlowStack& stack, const Tensor& x, const Tensor& cond) { stack.actnorm_init(x, cond); }

}  // namespace cpf
