#include "cpf/trainer.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

namespace cpf {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

void TrainConfig::validate() const {
  if (mode != "single" && mode != "full") throw Error("mode must be 'single' or 'full'");
  if (batch_size < 1) throw Error("batch_size must be positive");
  if (mode == "full" && points_per_cloud < 1) throw Error("train_points must be positive");
  if (!(lr > 0.0)) throw Error("lr must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw Error("beta1 and beta2 must lie in (0, 1)");
  if (!(adam_eps > 0.0)) throw Error("adam_eps must be positive");
  if (!(lr_decay > 0.0)) throw Error("lr_decay must be positive");
  if (lr_decay_period < 1) throw Error("lr_decay_period must be positive");
  if (clip_norm < 0.0) throw Error("clip_norm must be nonnegative");
  if (log_every < 1) throw Error("log_every must be positive");
}

// ---- Adam -----------------------------------------------------------------

Adam::Adam(const ParamList& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params)
    if (p.trainable) params_.push_back(p);
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

double Adam::step(double lr, double clip_norm) {
  double norm2 = 0.0;
  for (const auto& p : params_) {
    auto g = p.tensor.grad();
    if (g.empty()) continue;
    for (double x : g) {
      if (!std::isfinite(x)) throw NumericError("adam: non-finite gradient in '" + p.name + "'");
      norm2 += x * x;
    }
  }
  const double norm = std::sqrt(norm2);
  const double clip = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor t = params_[k].tensor;
    auto g = t.grad();
    if (g.empty()) continue;
    auto w = t.mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
  return norm;
}

void Adam::collect(ParamList& out) const {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto& p = params_[k];
    out.push_back({"adam.m." + p.name, Tensor::from(p.tensor.rows(), p.tensor.cols(), m_[k]), false});
    out.push_back({"adam.v." + p.name, Tensor::from(p.tensor.rows(), p.tensor.cols(), v_[k]), false});
  }
  out.push_back({"adam.step", Tensor::scalar(static_cast<double>(step_)), false});
}

void Adam::restore(const Checkpoint& ckpt) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto* m = ckpt.find("adam.m." + params_[k].name);
    const auto* v = ckpt.find("adam.v." + params_[k].name);
    if (!m || !v) throw Error("checkpoint has no optimizer state for '" + params_[k].name + "'");
    m_[k].assign(m->tensor.values().begin(), m->tensor.values().end());
    v_[k].assign(v->tensor.values().begin(), v->tensor.values().end());
  }
  if (const auto* s = ckpt.find("adam.step")) step_ = static_cast<std::size_t>(s->tensor.item());
}

double lr_at(std::size_t epoch, const TrainConfig& config) {
  if (config.mode != "full") return config.lr;
  return config.lr * std::pow(config.lr_decay, static_cast<double>(epoch / config.lr_decay_period));
}

// ---- loops ----------------------------------------------------------------

namespace {

void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

struct Loop {
  const TrainConfig& config;
  const ModelConfig& model_config;
  ParamList params;
  Adam adam;
  TrainResult result;
  const TrainCallback& callback;

  Loop(const TrainConfig& c, const ModelConfig& mc, ParamList p, const TrainCallback& cb)
      : config(c), model_config(mc), params(std::move(p)), adam(params, c.beta1, c.beta2, c.adam_eps),
        callback(cb) {}

  void save() {
    if (!config.checkpoint.empty()) save_model(config.checkpoint, model_config, params, &adam);
  }

  // loss_fn returns the summed loss and the point count it covers.
  void run(const std::function<std::pair<Tensor, std::size_t>(std::size_t)>& loss_fn,
           const std::function<std::size_t(std::size_t)>& epoch_of) {
    for (std::size_t it = 0; it < config.iterations; ++it) {
      const double lr = lr_at(epoch_of(it), config);
      zero_grads(params);
      double per_point = 0.0;
      {
        Tape tape;
        auto [loss, count] = loss_fn(it);
        per_point = loss.item() / static_cast<double>(count);
        if (!std::isfinite(per_point))
          throw NumericError("training: non-finite loss at iteration " + std::to_string(it));
        tape.backward(scale(loss, 1.0 / static_cast<double>(count)));
      }
      adam.step(lr, config.clip_norm);
      if (it == 0) result.initial_loss = per_point;
      result.final_loss = per_point;
      if (it % config.log_every == 0 || it + 1 == config.iterations) {
        LossRecord rec{it, per_point, lr};
        result.trace.push_back(rec);
        if (callback) callback(rec);
      }
      if (config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0) save();
    }
    save();
    if (!config.loss_csv.empty()) write_loss_csv(config.loss_csv, result.trace);
  }
};

}  // namespace

TrainResult train_single(SingleCloudModel& model, const PointCloud& cloud, const TrainConfig& config,
                         const TrainCallback& callback) {
  config.validate();
  if (cloud.size() == 0) throw Error("train: empty cloud");
  if (cloud.dim != model.config().dim)
    throw ShapeError("train: cloud dimension " + std::to_string(cloud.dim) + " does not match model dimension " +
                     std::to_string(model.config().dim));
  ParamList params;
  model.collect(params);
  Loop loop(config, model.config(), params, callback);
  Rng rng(config.seed);
  const std::size_t b = config.batch_size;
  auto batch = [&]() {
    std::vector<double> v(b * cloud.dim);
    for (std::size_t i = 0; i < b; ++i) {
      const auto k = rng.below(cloud.size());
      for (std::size_t d = 0; d < cloud.dim; ++d) v[i * cloud.dim + d] = cloud.at(k, d);
    }
    return Tensor::from(b, cloud.dim, std::move(v));
  };
  loop.run(
      [&](std::size_t) {
        Tensor x = batch();
        if (!model.flow().actnorm_initialized()) model.actnorm_init(x);
        return std::pair{model.loss(x, rng), b};
      },
      [](std::size_t it) { return it; });
  return loop.result;
}

TrainResult train_full(FullModel& model, const std::vector<PointCloud>& clouds, const TrainConfig& config,
                       const TrainCallback& callback) {
  config.validate();
  if (clouds.empty()) throw Error("train: empty dataset");
  const std::size_t m = config.points_per_cloud;
  for (const auto& c : clouds) {
    if (c.dim != model.config().dim) throw ShapeError("train: cloud dimension does not match model dimension");
    if (c.size() < m)
      throw Error("train: clouds need at least train_points = " + std::to_string(m) + " points, found " +
                  std::to_string(c.size()));
  }
  ParamList params;
  model.collect(params);
  Loop loop(config, model.config(), params, callback);
  Rng rng(config.seed);
  const std::size_t n_obj = clouds.size();
  const std::size_t b = std::min(config.batch_size, n_obj);
  std::vector<std::size_t> order(n_obj);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n_obj;
  auto next_object = [&]() {
    if (cursor == n_obj) {
      for (std::size_t i = n_obj; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      cursor = 0;
    }
    return order[cursor++];
  };
  std::vector<std::size_t> idx;
  auto batch = [&]() {
    std::vector<double> v;
    v.reserve(b * m * model.config().dim);
    for (std::size_t c = 0; c < b; ++c) {
      const auto& cloud = clouds[next_object()];
      idx.resize(cloud.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t i = 0; i < m; ++i) {
        std::swap(idx[i], idx[i + rng.below(cloud.size() - i)]);
        for (std::size_t d = 0; d < cloud.dim; ++d) v.push_back(cloud.at(idx[i], d));
      }
    }
    return Tensor::from(b * m, model.config().dim, std::move(v));
  };
  model.set_training(true);
  loop.run(
      [&](std::size_t) {
        Tensor x = batch();
        if (!model.flow().actnorm_initialized()) model.actnorm_init(x);
        FullTerms terms = model.elbo_terms(x, m, rng, true);
        Tensor loss = add(model.loss(terms), model.chart_generator_loss(terms, m));
        return std::pair{loss, b * m};
      },
      [&](std::size_t it) { return it * b / n_obj; });
  model.set_training(false);
  return loop.result;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& trace) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write loss trace '" + path.string() + "'");
  out << "iteration,loss,lr\n";
  for (const auto& r : trace) out << r.iteration << ',' << fmt(r.loss) << ',' << fmt(r.lr) << '\n';
}

void save_model(const std::filesystem::path& path, const ModelConfig& config, const ParamList& params,
                const Adam* adam) {
  ParamList all = params;
  if (adam) adam->collect(all);
  save_checkpoint(path, config.to_map(), all);
}

LoadedModel load_model(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  LoadedModel out;
  out.config = ModelConfig::from_map(ckpt.hyper);
  ParamList params;
  if (out.config.mode == "single") {
    out.single = std::make_unique<SingleCloudModel>(out.config);
    out.single->collect(params);
  } else {
    out.full = std::make_unique<FullModel>(out.config);
    out.full->collect(params);
  }
  restore_tensors(params, ckpt);
  return out;
}

}  // namespace cpf
