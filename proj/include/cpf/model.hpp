#pragma once

// The single-cloud flow with charts and the full multi-object model.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cpf/charts.hpp"
#include "cpf/cnf.hpp"
#include "cpf/data.hpp"
#include "cpf/flow.hpp"
#include "cpf/layers.hpp"

namespace cpf {

struct ModelConfig {
  std::string mode = "single";  // single | full
  std::size_t dim = 2;
  std::size_t charts = 4;
  double tau = 0.1;
  double mu = 0.05;
  double lambda = 1.1;
  double width_scale = 0.25;
  std::size_t flow_blocks = 9;
  std::size_t feature_dim = 8;
  std::size_t prior_blocks = 3;
  std::string prior_backend = "discrete";  // discrete | cnf
  std::size_t cnf_steps = 20;
  std::uint64_t seed = 0;

  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& m);
  void validate() const;
};

struct SingleTerms {
  Tensor log_probs;  // log pi_C, rows x n
  Tensor y_tilde;
  Tensor z;
  Tensor log_pz;     // rows x 1
  Tensor logdet;     // log|det dF^-1/dx|, rows x 1
  double cross_entropy = 0.0;  // H[q_C | p(y)] = log n under the uniform prior
  Tensor entropy;    // rows x 1
  Tensor elbo;       // rows x 1
};

struct Generated {
  PointCloud cloud;  // labels hold the chart id of each point
};

class SingleCloudModel {
 public:
  explicit SingleCloudModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  FlowStack& flow() { return *flow_; }
  PredictorNet& predictor() { return predictor_; }

  // Per-point approximated ELBO with one relaxed label draw per point.
  SingleTerms elbo_terms(const Tensor& x, Rng& rng);
  SingleTerms elbo_terms(const Tensor& x, const Tensor& gumbel);
  // -sum_x elbo - mi_regularizer(lambda, lambda); 1 x 1.
  Tensor loss(const Tensor& x, Rng& rng);
  Tensor loss(const Tensor& x, const Tensor& gumbel);
  Tensor log_probs(const Tensor& x);

  void actnorm_init(const Tensor& x);
  // y ~ uniform, z ~ N(0, I), x = F(z; onehot(y)).
  PointCloud generate(std::size_t points, Rng& rng);

  void collect(ParamList& out) const;
  void set_training(bool) {}

 private:
  ModelConfig config_;
  std::unique_ptr<FlowStack> flow_;
  PredictorNet predictor_;
};

struct FullTerms {
  Encoding encoding;
  Tensor log_probs;     // points x n
  Tensor y_tilde;
  Tensor log_pf;        // points x 1
  Tensor entropy;       // points x 1
  double cross_entropy = 0.0;
  Tensor log_q;         // clouds x 1, log q_E(s_X | X)
  Tensor log_prior;     // clouds x 1, log p_G(s_X)
  Tensor elbo;          // clouds x 1
  Tensor mi;            // clouds x 1
};

class FullModel {
 public:
  explicit FullModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  EncoderNet& encoder() { return encoder_; }
  Bijection& prior() { return *prior_; }
  FlowStack& flow() { return *flow_; }
  PredictorNet& predictor() { return predictor_; }
  GeneratorHead& generator() { return generator_; }

  // points: clouds stacked consecutively, `per_cloud` rows each.
  FullTerms elbo_terms(const Tensor& points, std::size_t per_cloud, Rng& rng, bool training);
  // -sum_X [elbo + mi_regularizer(mu, lambda)]; 1 x 1.
  Tensor loss(const FullTerms& terms) const;
  // sum_X KL(p_K(y | s_X) || qbar_X) with s_X and qbar detached; 1 x 1.
  Tensor chart_generator_loss(const FullTerms& terms, std::size_t per_cloud);

  void actnorm_init(const Tensor& points);
  void set_training(bool training);
  bool training() const { return training_; }

  PointCloud generate(std::size_t points, Rng& rng);
  // Posterior-mean feature vector, then the generation loop.
  PointCloud reconstruct(const PointCloud& cloud, std::size_t points, Rng& rng);
  // Argmax chart per point under the predictor conditioned on the posterior mean.
  std::vector<int> segment(const PointCloud& cloud);
  Tensor posterior_mean(const PointCloud& cloud);

  // log mean_k p(X | s_k) p_G(s_k) / q_E(s_k | X) with the labels summed out
  // exactly; s_k from the encoder posterior.
  double importance_log_likelihood(const PointCloud& cloud, std::size_t samples, Rng& rng);

  void collect(ParamList& out) const;

 private:
  PointCloud decode(const Tensor& feature, std::size_t points, Rng& rng);

  ModelConfig config_;
  EncoderNet encoder_;
  std::unique_ptr<Bijection> prior_;
  std::unique_ptr<FlowStack> flow_;
  PredictorNet predictor_;
  GeneratorHead generator_;
  bool training_ = false;
};

// KL(p || q) summed over rows, p given by log-probabilities, q a constant
// target floored at 1e-12.
Tensor kl_to_target(const Tensor& log_p, const Tensor& target);

std::vector<std::size_t> encoder_point_widths(double scale);

}  // namespace cpf
