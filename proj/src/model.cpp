#include "cpf/model.hpp"

#include <charconv>
#include <cmath>
#include <numbers>

namespace cpf {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

const std::string& need(const std::map<std::string, std::string>& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw Error("model config: missing key '" + key + "'");
  return it->second;
}

double to_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw Error("model config: '" + key + "' is not a number: '" + s + "'");
  return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw Error("model config: '" + key + "' is not a nonnegative integer: '" + s + "'");
  return v;
}

Tensor one_hot(const std::vector<int>& labels, std::size_t n) {
  Tensor t = Tensor::zeros(labels.size(), n);
  auto v = t.mutable_values();
  for (std::size_t i = 0; i < labels.size(); ++i) v[i * n + static_cast<std::size_t>(labels[i])] = 1.0;
  return t;
}

Tensor normal_tensor(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.mutable_values()) v = rng.normal();
  return t;
}

int sample_categorical(std::span<const double> p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    acc += p[j];
    if (u < acc) return static_cast<int>(j);
  }
  // Rounding left u above the total; pick the last chart with mass.
  for (std::size_t j = p.size(); j-- > 0;)
    if (p[j] > 0.0) return static_cast<int>(j);
  return 0;
}

}  // namespace

// ---- ModelConfig ----------------------------------------------------------

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {{"mode", mode},
          {"dim", std::to_string(dim)},
          {"charts", std::to_string(charts)},
          {"tau", fmt(tau)},
          {"mu", fmt(mu)},
          {"lambda", fmt(lambda)},
          {"width_scale", fmt(width_scale)},
          {"flow_blocks", std::to_string(flow_blocks)},
          {"feature_dim", std::to_string(feature_dim)},
          {"prior_blocks", std::to_string(prior_blocks)},
          {"prior_backend", prior_backend},
          {"cnf_steps", std::to_string(cnf_steps)},
          {"seed", std::to_string(seed)}};
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& m) {
  ModelConfig c;
  c.mode = need(m, "mode");
  c.dim = to_u64("dim", need(m, "dim"));
  c.charts = to_u64("charts", need(m, "charts"));
  c.tau = to_double("tau", need(m, "tau"));
  c.mu = to_double("mu", need(m, "mu"));
  c.lambda = to_double("lambda", need(m, "lambda"));
  c.width_scale = to_double("width_scale", need(m, "width_scale"));
  c.flow_blocks = to_u64("flow_blocks", need(m, "flow_blocks"));
  c.feature_dim = to_u64("feature_dim", need(m, "feature_dim"));
  c.prior_blocks = to_u64("prior_blocks", need(m, "prior_blocks"));
  c.prior_backend = need(m, "prior_backend");
  c.cnf_steps = to_u64("cnf_steps", need(m, "cnf_steps"));
  c.seed = to_u64("seed", need(m, "seed"));
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  if (mode != "single" && mode != "full") throw Error("mode must be 'single' or 'full', got '" + mode + "'");
  if (dim != 2 && dim != 3) throw Error("dim must be 2 or 3");
  if (charts < 1) throw Error("charts must be at least 1");
  if (!(tau > 0.0)) throw Error("tau must be positive");
  if (mu < 0.0 || lambda < 0.0) throw Error("mu and lambda must be nonnegative");
  if (!(width_scale > 0.0)) throw Error("width_scale must be positive");
  if (flow_blocks < 1) throw Error("flow_blocks must be at least 1");
  if (mode == "full" && feature_dim < 1) throw Error("feature_dim must be at least 1");
  if (prior_backend != "discrete" && prior_backend != "cnf")
    throw Error("prior_backend must be 'discrete' or 'cnf', got '" + prior_backend + "'");
  if (prior_backend == "cnf" && cnf_steps < 4) throw Error("cnf_steps must be at least 4");
}

std::vector<std::size_t> encoder_point_widths(double scale) {
  return {scaled_width(128, scale), scaled_width(128, scale), scaled_width(256, scale), scaled_width(512, scale)};
}

Tensor kl_to_target(const Tensor& log_p, const Tensor& target) {
  if (log_p.shape() != target.shape()) throw ShapeError("kl_to_target: shape mismatch");
  std::vector<double> logq(target.size());
  auto t = target.values();
  for (std::size_t i = 0; i < logq.size(); ++i) logq[i] = std::log(std::max(t[i], 1e-12));
  Tensor lq = Tensor::from(target.rows(), target.cols(), std::move(logq));
  return sum(mul(exp(log_p), sub(log_p, lq)));
}

// ---- SingleCloudModel -----------------------------------------------------

SingleCloudModel::SingleCloudModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t h = scaled_width(256, config_.width_scale);
  flow_ = make_point_flow(config_.dim, config_.charts, config_.flow_blocks, h, rng);
  predictor_ = PredictorNet(config_.dim, 1, h, h, config_.charts, rng);
}

Tensor SingleCloudModel::log_probs(const Tensor& x) {
  return log_softmax(predict_charts(x, Tensor(), predictor_));
}

SingleTerms SingleCloudModel::elbo_terms(const Tensor& x, Rng& rng) {
  return elbo_terms(x, gumbel_noise(x.rows(), config_.charts, rng));
}

SingleTerms SingleCloudModel::elbo_terms(const Tensor& x, const Tensor& gumbel) {
  if (x.rows() == 0) throw Error("elbo: empty cloud");
  SingleTerms t;
  t.log_probs = log_probs(x);
  t.y_tilde = gumbel_softmax(t.log_probs, config_.tau, gumbel);
  FlowResult r = flow_->inverse(x, t.y_tilde);
  t.z = r.value;
  t.log_pz = standard_normal_logpdf(r.value);
  t.logdet = r.logdet;
  t.cross_entropy = std::log(static_cast<double>(config_.charts));
  t.entropy = entropy_from_log_probs(t.log_probs);
  t.elbo = add(add_scalar(add(t.log_pz, t.logdet), -t.cross_entropy), t.entropy);
  return t;
}

Tensor SingleCloudModel::loss(const Tensor& x, Rng& rng) {
  return loss(x, gumbel_noise(x.rows(), config_.charts, rng));
}

Tensor SingleCloudModel::loss(const Tensor& x, const Tensor& gumbel) {
  SingleTerms t = elbo_terms(x, gumbel);
  return neg(add(sum(t.elbo), mi_regularizer(t.log_probs, config_.lambda, config_.lambda)));
}

void SingleCloudModel::actnorm_init(const Tensor& x) {
  flow_->actnorm_init(x, Tensor::full(x.rows(), config_.charts, 1.0 / static_cast<double>(config_.charts)));
}

PointCloud SingleCloudModel::generate(std::size_t points, Rng& rng) {
  NoGradScope no_grad;
  std::vector<int> labels(points);
  for (int& y : labels) y = static_cast<int>(rng.below(config_.charts));
  Tensor z = normal_tensor(points, config_.dim, rng);
  Tensor x = flow_->forward(z, one_hot(labels, config_.charts)).value;
  return PointCloud::from_tensor(x, std::move(labels));
}

void SingleCloudModel::collect(ParamList& out) const {
  flow_->collect(out, "F");
  predictor_.collect(out, "C");
}

// ---- FullModel ------------------------------------------------------------

FullModel::FullModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const double ws = config_.width_scale;
  const std::size_t h = scaled_width(256, ws);
  const std::size_t f = config_.feature_dim;
  EncoderWidths widths;
  widths.point = encoder_point_widths(ws);
  widths.head = {scaled_width(256, ws), scaled_width(128, ws)};
  encoder_ = EncoderNet(config_.dim, f, widths, rng);
  if (config_.prior_backend == "cnf") {
    CnfOptions opts;
    opts.steps = config_.cnf_steps;
    opts.trace = f <= 16 ? TraceMode::exact : TraceMode::hutchinson;
    prior_ = std::make_unique<CnfBackend>(std::make_unique<ConcatSquashField>(f, h, 0, rng), opts,
                                          rng.next_u64());
  } else {
    prior_ = make_prior_flow(f, config_.prior_blocks, h, rng);
  }
  flow_ = make_point_flow(config_.dim, config_.charts + f, config_.flow_blocks, h, rng);
  predictor_ = PredictorNet(config_.dim, f, h, h, config_.charts, rng);
  generator_ = GeneratorHead(f, {scaled_width(256, ws), scaled_width(512, ws), scaled_width(256, ws),
                                 scaled_width(128, ws)},
                             config_.charts, rng);
}

void FullModel::set_training(bool training) {
  training_ = training;
  prior_->set_training(training);
  flow_->set_training(training);
}

FullTerms FullModel::elbo_terms(const Tensor& points, std::size_t per_cloud, Rng& rng, bool training) {
  if (per_cloud == 0 || points.rows() == 0) throw Error("elbo_full: empty cloud");
  if (points.rows() % per_cloud != 0) throw ShapeError("elbo_full: rows are not a multiple of the cloud size");
  const std::size_t n = config_.charts;
  const std::size_t clouds = points.rows() / per_cloud;
  FullTerms t;
  t.encoding = encode(encoder_, points, per_cloud, rng, training);
  Tensor s_rep = repeat_rows(t.encoding.sample, per_cloud);
  t.log_probs = log_softmax(predictor_.logits(points, s_rep));
  t.y_tilde = gumbel_softmax(t.log_probs, config_.tau, gumbel_noise(points.rows(), n, rng));
  FlowResult r = flow_->inverse(points, concat_cols(t.y_tilde, s_rep));
  t.log_pf = add(standard_normal_logpdf(r.value), r.logdet);
  t.entropy = entropy_from_log_probs(t.log_probs);
  t.cross_entropy = std::log(static_cast<double>(n));
  Tensor per_point = add_scalar(add(t.log_pf, t.entropy), -t.cross_entropy);

  const Tensor& lv = t.encoding.logvar;
  t.log_q = scale(sum_axis(add_scalar(add(lv, square(t.encoding.noise)), kLog2Pi), 1), -0.5);
  FlowResult g = prior_->inverse(t.encoding.sample, Tensor());
  t.log_prior = add(standard_normal_logpdf(g.value), g.logdet);
  t.elbo = sub(group_sum(per_point, per_cloud), sub(t.log_q, t.log_prior));

  std::vector<Tensor> mi;
  for (std::size_t c = 0; c < clouds; ++c)
    mi.push_back(mi_regularizer(slice_rows(t.log_probs, c * per_cloud, (c + 1) * per_cloud), config_.mu,
                                config_.lambda));
  t.mi = concat_rows(mi);
  return t;
}

Tensor FullModel::loss(const FullTerms& t) const { return neg(add(sum(t.elbo), sum(t.mi))); }

Tensor FullModel::chart_generator_loss(const FullTerms& t, std::size_t per_cloud) {
  Tensor qbar;
  {
    NoGradScope no_grad;
    qbar = group_mean(exp(t.log_probs.detach()), per_cloud);
  }
  Tensor log_pk = log_softmax(generator_.logits(t.encoding.sample.detach()));
  return kl_to_target(log_pk, qbar);
}

void FullModel::actnorm_init(const Tensor& points) {
  const std::size_t n = config_.charts, f = config_.feature_dim;
  Tensor cond = concat_cols(Tensor::full(points.rows(), n, 1.0 / static_cast<double>(n)),
                            Tensor::zeros(points.rows(), f));
  flow_->actnorm_init(points, cond);
}

PointCloud FullModel::decode(const Tensor& feature, std::size_t points, Rng& rng) {
  NoGradScope no_grad;
  const std::size_t n = config_.charts;
  Tensor pk = generate_chart_distribution(feature, generator_);
  std::vector<int> labels(points);
  for (int& y : labels) y = sample_categorical(pk.values(), rng);
  Tensor z = normal_tensor(points, config_.dim, rng);
  Tensor cond = concat_cols(one_hot(labels, n), repeat_rows(feature, points));
  Tensor x = flow_->forward(z, cond).value;
  return PointCloud::from_tensor(x, std::move(labels));
}

PointCloud FullModel::generate(std::size_t points, Rng& rng) {
  Tensor s;
  {
    NoGradScope no_grad;
    Tensor w = normal_tensor(1, config_.feature_dim, rng);
    s = prior_->forward(w, Tensor()).value;
  }
  return decode(s, points, rng);
}

Tensor FullModel::posterior_mean(const PointCloud& cloud) {
  if (cloud.size() == 0) throw Error("reconstruct: empty input cloud");
  if (cloud.dim != config_.dim)
    throw ShapeError("cloud has dimension " + std::to_string(cloud.dim) + ", model expects " +
                     std::to_string(config_.dim));
  NoGradScope no_grad;
  return encoder_.forward(cloud.to_tensor(), cloud.size(), false).first;
}

PointCloud FullModel::reconstruct(const PointCloud& cloud, std::size_t points, Rng& rng) {
  return decode(posterior_mean(cloud), points, rng);
}

std::vector<int> FullModel::segment(const PointCloud& cloud) {
  Tensor s = posterior_mean(cloud);
  NoGradScope no_grad;
  Tensor logits = predictor_.logits(cloud.to_tensor(), repeat_rows(s, cloud.size()));
  const std::size_t n = config_.charts;
  std::vector<int> out(cloud.size());
  auto v = logits.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (v[i * n + j] > v[i * n + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

double FullModel::importance_log_likelihood(const PointCloud& cloud, std::size_t samples, Rng& rng) {
  NoGradScope no_grad;
  const std::size_t n = config_.charts, m = cloud.size();
  Tensor x = cloud.to_tensor();
  auto [mean, logvar] = encoder_.forward(x, m, false);
  std::vector<double> logw;
  for (std::size_t k = 0; k < samples; ++k) {
    Tensor eta = normal_tensor(1, config_.feature_dim, rng);
    Tensor s = add(mean, mul(exp(scale(logvar, 0.5)), eta));
    const double log_q = scale(sum_axis(add_scalar(add(logvar, square(eta)), kLog2Pi), 1), -0.5).item();
    FlowResult g = prior_->inverse(s, Tensor());
    const double log_prior = add(standard_normal_logpdf(g.value), g.logdet).item();
    Tensor s_rep = repeat_rows(s, m);
    std::vector<Tensor> per_label;
    for (std::size_t y = 0; y < n; ++y) {
      std::vector<int> labels(m, static_cast<int>(y));
      FlowResult r = flow_->inverse(x, concat_cols(one_hot(labels, n), s_rep));
      per_label.push_back(add(standard_normal_logpdf(r.value), r.logdet));
    }
    const double log_px =
        sum(add_scalar(logsumexp(concat_cols(per_label)), -std::log(static_cast<double>(n)))).item();
    logw.push_back(log_px + log_prior - log_q);
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  double acc = 0.0;
  for (double w : logw) acc += std::exp(w - mx);
  return mx + std::log(acc / static_cast<double>(samples));
}

void FullModel::collect(ParamList& out) const {
  encoder_.collect(out, "E");
  prior_->collect(out, "G");
  flow_->collect(out, "F");
  predictor_.collect(out, "C");
  generator_.collect(out, "K");
}

}  // namespace cpf
