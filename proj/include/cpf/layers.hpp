#pragma once

// Network building blocks: linear and concatsquash layers, running-statistics
// normalization, the permutation-invariant point encoder, the per-point chart
// predictor and the per-cloud chart generator head.

#include <string>
#include <vector>

#include "cpf/autodiff.hpp"
#include "cpf/rng.hpp"

namespace cpf {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};
using ParamList = std::vector<NamedTensor>;

std::vector<Tensor> trainable(const ParamList& params);
void zero_parameters(const ParamList& params);
// Overwrites every trainable tensor with U(-bound, bound) draws.
void randomize_parameters(const ParamList& params, Rng& rng, double bound);

// Reference width times the configured scale factor, at least 1.
std::size_t scaled_width(std::size_t width, double factor);

Tensor uniform_parameter(std::size_t rows, std::size_t cols, double bound, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);

  Tensor forward(const Tensor& x) const { return affine(x, w_, b_); }
  void collect(ParamList& out, const std::string& prefix) const;
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor w_, b_;
};

// CS(chi, xi) = (W_chi chi + b_chi) * sigmoid(W_xi xi + b_xi) + W_b xi + b_b.
// Either width may be zero, in which case that path reduces to its bias.
class ConcatSquash {
 public:
  ConcatSquash() = default;
  ConcatSquash(std::size_t in, std::size_t out, std::size_t cond, Rng& rng);

  Tensor forward(const Tensor& chi, const Tensor& xi) const;
  // Gate sigmoid(W_xi xi + b_xi), exposed for Jacobian-vector products.
  Tensor gate(const Tensor& xi) const;
  // W_chi v: the input-path derivative applied to a tangent.
  Tensor input_jvp(const Tensor& v) const { return matmul(v, wx_); }

  void collect(ParamList& out, const std::string& prefix) const;
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  std::size_t cond() const { return cond_; }

 private:
  Tensor cond_path(const Tensor& xi, const Tensor& w, const Tensor& b) const;

  std::size_t in_ = 0, out_ = 0, cond_ = 0;
  Tensor wx_, bx_, wg_, bg_, wb_, bb_;
};

// Per-feature running mean/variance (momentum 0.9). The first training
// update copies the batch statistics; afterwards
// running = momentum * running + (1 - momentum) * batch.
struct RunningStats {
  RunningStats() = default;
  explicit RunningStats(std::size_t features);

  void update(const Tensor& x);
  // Per-feature (x - mean) / sqrt(var + eps) with statistics as constants.
  Tensor normalize(const Tensor& x) const;
  Tensor denormalize(const Tensor& x) const;
  // sum_j 0.5 * log(var_j + eps)
  double log_scale() const;
  void collect(ParamList& out, const std::string& prefix) const;

  static constexpr double kMomentum = 0.9;
  static constexpr double kEps = 1e-5;
  Tensor mean, var, count;
};

// Running-statistics normalization with a trainable affine (gamma, beta).
class Normalization {
 public:
  Normalization() = default;
  explicit Normalization(std::size_t features);

  Tensor forward(const Tensor& x, bool training);
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  RunningStats stats_;
  Tensor gamma_, beta_;
};

struct EncoderWidths {
  std::vector<std::size_t> point{128, 128, 256, 512};
  std::vector<std::size_t> head{256, 128};
};

struct Encoding {
  Tensor sample;  // s_X, one row per cloud
  Tensor mean;
  Tensor logvar;
  Tensor noise;  // eta used for the sample
};

class EncoderNet {
 public:
  static constexpr double kLogvarMin = -10.0;
  static constexpr double kLogvarMax = 10.0;

  EncoderNet() = default;
  EncoderNet(std::size_t dim, std::size_t feature_dim, const EncoderWidths& widths, Rng& rng);

  // points: (clouds * per_cloud) x dim, clouds stacked consecutively.
  // Returns (mean, logvar), one row per cloud; logvar clamped to [-10, 10].
  std::pair<Tensor, Tensor> forward(const Tensor& points, std::size_t per_cloud, bool training);
  void collect(ParamList& out, const std::string& prefix) const;
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t dim() const { return dim_; }

 private:
  Tensor head(const std::vector<Linear>& layers, std::vector<Normalization>& norms,
              const Linear& last, const Tensor& pooled, bool training);

  std::size_t dim_ = 0, feature_dim_ = 0;
  std::vector<Linear> point_layers_;
  std::vector<Normalization> point_norms_;
  std::vector<Linear> mean_layers_, logvar_layers_;
  std::vector<Normalization> mean_norms_, logvar_norms_;
  Linear mean_out_, logvar_out_;
};

// s_X = mean + exp(logvar / 2) * eta, eta ~ N(0, I) from rng.
Encoding encode(EncoderNet& net, const Tensor& points, std::size_t per_cloud, Rng& rng,
                bool training);

// Three concatsquash layers with tanh between them, emitting n logits.
class PredictorNet {
 public:
  PredictorNet() = default;
  PredictorNet(std::size_t dim, std::size_t cond_dim, std::size_t hidden1, std::size_t hidden2,
               std::size_t charts, Rng& rng);

  Tensor logits(const Tensor& x, const Tensor& cond) const;
  void collect(ParamList& out, const std::string& prefix) const;
  std::size_t charts() const { return charts_; }
  std::size_t cond_dim() const { return cond_dim_; }

 private:
  std::size_t charts_ = 0, cond_dim_ = 0;
  ConcatSquash l1_, l2_, l3_;
};

// Logits per point. `cond` absent (undefined) means the single-cloud model,
// where the condition is the constant 1.
Tensor predict_charts(const Tensor& x, const Tensor& cond, const PredictorNet& net);

// Fully connected layers with ReLU between them, emitting n logits per cloud.
class GeneratorHead {
 public:
  GeneratorHead() = default;
  GeneratorHead(std::size_t feature_dim, const std::vector<std::size_t>& hidden, std::size_t charts,
                Rng& rng);

  Tensor logits(const Tensor& features) const;
  void collect(ParamList& out, const std::string& prefix) const;
  std::size_t charts() const { return charts_; }

 private:
  std::size_t charts_ = 0;
  std::vector<Linear> layers_;
};

// Categorical distribution p_K(y | s_X), one row per cloud.
Tensor generate_chart_distribution(const Tensor& features, const GeneratorHead& head);

}  // namespace cpf
