#include "cpf/layers.hpp"

#include <cmath>

namespace cpf {

std::vector<Tensor> trainable(const ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params)
    if (p.trainable) out.push_back(p.tensor);
  return out;
}

void zero_parameters(const ParamList& params) {
  for (auto p : params)
    if (p.trainable)
      for (double& v : p.tensor.mutable_values()) v = 0.0;
}

void randomize_parameters(const ParamList& params, Rng& rng, double bound) {
  for (auto p : params)
    if (p.trainable)
      for (double& v : p.tensor.mutable_values()) v = bound * (2.0 * rng.uniform() - 1.0);
}

std::size_t scaled_width(std::size_t width, double factor) {
  const auto w = static_cast<long long>(std::llround(static_cast<double>(width) * factor));
  return w < 1 ? 1 : static_cast<std::size_t>(w);
}

Tensor uniform_parameter(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = bound * (2.0 * rng.uniform() - 1.0);
  return Tensor::parameter(rows, cols, std::move(v));
}

namespace {
double fan_bound(std::size_t fan_in) { return fan_in == 0 ? 1.0 : 1.0 / std::sqrt(static_cast<double>(fan_in)); }
}  // namespace

// ---- Linear ---------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : in_(in), out_(out), w_(uniform_parameter(in, out, fan_bound(in), rng)),
      b_(uniform_parameter(1, out, fan_bound(in), rng)) {}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".w", w_, true});
  out.push_back({prefix + ".b", b_, true});
}

// ---- ConcatSquash ---------------------------------------------------------

ConcatSquash::ConcatSquash(std::size_t in, std::size_t out, std::size_t cond, Rng& rng)
    : in_(in), out_(out), cond_(cond),
      wx_(uniform_parameter(in, out, fan_bound(in), rng)),
      bx_(uniform_parameter(1, out, fan_bound(in), rng)),
      wg_(uniform_parameter(cond, out, fan_bound(cond), rng)),
      bg_(uniform_parameter(1, out, fan_bound(cond), rng)),
      wb_(uniform_parameter(cond, out, fan_bound(cond), rng)),
      bb_(uniform_parameter(1, out, fan_bound(cond), rng)) {}

Tensor ConcatSquash::cond_path(const Tensor& xi, const Tensor& w, const Tensor& b) const {
  // Without a condition the path is its bias row, broadcast by the caller.
  if (cond_ == 0) return b;
  return affine(xi, w, b);
}

Tensor ConcatSquash::gate(const Tensor& xi) const {
  if (cond_ > 0 && xi.cols() != cond_)
    throw ShapeError("concatsquash: condition has " + std::to_string(xi.cols()) +
                     " columns, layer expects " + std::to_string(cond_));
  return sigmoid(cond_path(xi, wg_, bg_));
}

Tensor ConcatSquash::forward(const Tensor& chi, const Tensor& xi) const {
  if (in_ > 0 && chi.cols() != in_)
    throw ShapeError("concatsquash: input has " + std::to_string(chi.cols()) +
                     " columns, layer expects " + std::to_string(in_));
  if (cond_ > 0 && xi.cols() != cond_)
    throw ShapeError("concatsquash: condition has " + std::to_string(xi.cols()) +
                     " columns, layer expects " + std::to_string(cond_));
  if (in_ > 0 && cond_ > 0 && chi.rows() != xi.rows())
    throw ShapeError("concatsquash: input rows " + std::to_string(chi.rows()) +
                     " != condition rows " + std::to_string(xi.rows()));
  const std::size_t rows = chi.defined() ? chi.rows() : xi.rows();
  Tensor input = in_ > 0 ? affine(chi, wx_, bx_) : bx_;
  Tensor g = gate(xi);
  Tensor bias = cond_path(xi, wb_, bb_);
  Tensor out = add(mul(input, g), bias);
  if (out.rows() != rows) out = add(Tensor::zeros(rows, out_), out);
  return out;
}

void ConcatSquash::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".w_chi", wx_, true});
  out.push_back({prefix + ".b_chi", bx_, true});
  out.push_back({prefix + ".w_xi", wg_, true});
  out.push_back({prefix + ".b_xi", bg_, true});
  out.push_back({prefix + ".w_b", wb_, true});
  out.push_back({prefix + ".b_b", bb_, true});
}

// ---- RunningStats / Normalization -----------------------------------------

RunningStats::RunningStats(std::size_t features)
    : mean(Tensor::zeros(1, features)), var(Tensor::full(1, features, 1.0)), count(Tensor::zeros(1, 1)) {}

void RunningStats::update(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  if (c != mean.cols()) throw ShapeError("running stats: feature width mismatch");
  if (r == 0) return;
  std::vector<double> m(c, 0.0), v(c, 0.0);
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[j] += xv[i * c + j];
  for (double& a : m) a /= static_cast<double>(r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xv[i * c + j] - m[j];
      v[j] += d * d;
    }
  for (double& a : v) a /= static_cast<double>(r);
  auto rm = mean.mutable_values();
  auto rv = var.mutable_values();
  const bool first = count.values()[0] == 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    rm[j] = first ? m[j] : kMomentum * rm[j] + (1.0 - kMomentum) * m[j];
    rv[j] = first ? v[j] : kMomentum * rv[j] + (1.0 - kMomentum) * v[j];
  }
  count.mutable_values()[0] += 1.0;
}

Tensor RunningStats::normalize(const Tensor& x) const {
  const std::size_t c = mean.cols();
  std::vector<double> inv(c);
  for (std::size_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(var.values()[j] + kEps);
  Tensor m = Tensor::from(1, c, {mean.values().begin(), mean.values().end()});
  return mul(sub(x, m), Tensor::from(1, c, std::move(inv)));
}

Tensor RunningStats::denormalize(const Tensor& x) const {
  const std::size_t c = mean.cols();
  std::vector<double> sd(c);
  for (std::size_t j = 0; j < c; ++j) sd[j] = std::sqrt(var.values()[j] + kEps);
  Tensor m = Tensor::from(1, c, {mean.values().begin(), mean.values().end()});
  return add(mul(x, Tensor::from(1, c, std::move(sd))), m);
}

double RunningStats::log_scale() const {
  double s = 0.0;
  for (double v : var.values()) s += 0.5 * std::log(v + kEps);
  return s;
}

void RunningStats::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".running_mean", mean, false});
  out.push_back({prefix + ".running_var", var, false});
  out.push_back({prefix + ".updates", count, false});
}

Normalization::Normalization(std::size_t features)
    : stats_(features), gamma_(Tensor::parameter(1, features, std::vector<double>(features, 1.0))),
      beta_(Tensor::parameter(1, features, std::vector<double>(features, 0.0))) {}

Tensor Normalization::forward(const Tensor& x, bool training) {
  if (training) stats_.update(x);
  return add(mul(stats_.normalize(x), gamma_), beta_);
}

void Normalization::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma_, true});
  out.push_back({prefix + ".beta", beta_, true});
  stats_.collect(out, prefix);
}

// ---- EncoderNet -----------------------------------------------------------

EncoderNet::EncoderNet(std::size_t dim, std::size_t feature_dim, const EncoderWidths& widths, Rng& rng)
    : dim_(dim), feature_dim_(feature_dim) {
  if (widths.point.empty()) throw Error("encoder: needs at least one per-point layer");
  std::size_t in = dim;
  for (std::size_t w : widths.point) {
    point_layers_.emplace_back(in, w, rng);
    point_norms_.emplace_back(w);
    in = w;
  }
  const std::size_t pooled = in;
  auto build_head = [&](std::vector<Linear>& layers, std::vector<Normalization>& norms, Linear& last) {
    std::size_t h = pooled;
    for (std::size_t w : widths.head) {
      layers.emplace_back(h, w, rng);
      norms.emplace_back(w);
      h = w;
    }
    last = Linear(h, feature_dim, rng);
  };
  build_head(mean_layers_, mean_norms_, mean_out_);
  build_head(logvar_layers_, logvar_norms_, logvar_out_);
}

Tensor EncoderNet::head(const std::vector<Linear>& layers, std::vector<Normalization>& norms,
                        const Linear& last, const Tensor& pooled, bool training) {
  Tensor h = pooled;
  for (std::size_t i = 0; i < layers.size(); ++i) h = relu(norms[i].forward(layers[i].forward(h), training));
  return last.forward(h);
}

std::pair<Tensor, Tensor> EncoderNet::forward(const Tensor& points, std::size_t per_cloud, bool training) {
  if (points.rows() == 0 || per_cloud == 0) throw Error("encode: empty point cloud");
  if (points.cols() != dim_)
    throw ShapeError("encode: points have " + std::to_string(points.cols()) + " columns, encoder expects " +
                     std::to_string(dim_));
  Tensor h = points;
  for (std::size_t i = 0; i < point_layers_.size(); ++i) {
    h = point_norms_[i].forward(point_layers_[i].forward(h), training);
    if (i + 1 < point_layers_.size()) h = relu(h);
  }
  Tensor pooled = group_max(h, per_cloud);
  Tensor mean = head(mean_layers_, mean_norms_, mean_out_, pooled, training);
  Tensor logvar = clamp(head(logvar_layers_, logvar_norms_, logvar_out_, pooled, training), kLogvarMin,
                        kLogvarMax);
  return {mean, logvar};
}

void EncoderNet::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < point_layers_.size(); ++i) {
    point_layers_[i].collect(out, prefix + ".point" + std::to_string(i));
    point_norms_[i].collect(out, prefix + ".point_norm" + std::to_string(i));
  }
  for (std::size_t i = 0; i < mean_layers_.size(); ++i) {
    mean_layers_[i].collect(out, prefix + ".mean" + std::to_string(i));
    mean_norms_[i].collect(out, prefix + ".mean_norm" + std::to_string(i));
  }
  mean_out_.collect(out, prefix + ".mean_out");
  for (std::size_t i = 0; i < logvar_layers_.size(); ++i) {
    logvar_layers_[i].collect(out, prefix + ".logvar" + std::to_string(i));
    logvar_norms_[i].collect(out, prefix + ".logvar_norm" + std::to_string(i));
  }
  logvar_out_.collect(out, prefix + ".logvar_out");
}

Encoding encode(EncoderNet& net, const Tensor& points, std::size_t per_cloud, Rng& rng, bool training) {
  auto [mean, logvar] = net.forward(points, per_cloud, training);
  std::vector<double> eta(mean.size());
  for (double& e : eta) e = rng.normal();
  Tensor noise = Tensor::from(mean.rows(), mean.cols(), std::move(eta));
  Tensor sample = add(mean, mul(exp(scale(logvar, 0.5)), noise));
  return {sample, mean, logvar, noise};
}

// ---- PredictorNet ---------------------------------------------------------

PredictorNet::PredictorNet(std::size_t dim, std::size_t cond_dim, std::size_t hidden1, std::size_t hidden2,
                           std::size_t charts, Rng& rng)
    : charts_(charts), cond_dim_(cond_dim), l1_(dim, hidden1, cond_dim, rng), l2_(hidden1, hidden2, cond_dim, rng),
      l3_(hidden2, charts, cond_dim, rng) {
  if (charts < 1) throw Error("chart predictor: number of charts must be at least 1");
}

Tensor PredictorNet::logits(const Tensor& x, const Tensor& cond) const {
  Tensor h = tanh(l1_.forward(x, cond));
  h = tanh(l2_.forward(h, cond));
  return l3_.forward(h, cond);
}

void PredictorNet::collect(ParamList& out, const std::string& prefix) const {
  l1_.collect(out, prefix + ".cs0");
  l2_.collect(out, prefix + ".cs1");
  l3_.collect(out, prefix + ".cs2");
}

Tensor predict_charts(const Tensor& x, const Tensor& cond, const PredictorNet& net) {
  if (net.charts() < 1) throw Error("predict_charts: n < 1");
  if (cond.defined()) return net.logits(x, cond);
  return net.logits(x, Tensor::full(x.rows(), 1, 1.0));
}

// ---- GeneratorHead --------------------------------------------------------

GeneratorHead::GeneratorHead(std::size_t feature_dim, const std::vector<std::size_t>& hidden, std::size_t charts,
                             Rng& rng)
    : charts_(charts) {
  if (charts < 1) throw Error("chart generator: number of charts must be at least 1");
  std::size_t in = feature_dim;
  for (std::size_t w : hidden) {
    layers_.emplace_back(in, w, rng);
    in = w;
  }
  layers_.emplace_back(in, charts, rng);
}

Tensor GeneratorHead::logits(const Tensor& features) const {
  Tensor h = features;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h);
    if (i + 1 < layers_.size()) h = relu(h);
  }
  return h;
}

void GeneratorHead::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + ".fc" + std::to_string(i));
}

Tensor generate_chart_distribution(const Tensor& features, const GeneratorHead& head) {
  return softmax(head.logits(features));
}

}  // namespace cpf
