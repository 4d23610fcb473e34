#include "cpf/charts.hpp"

#include <cmath>

namespace cpf {

Tensor gumbel_noise(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor g = Tensor::zeros(rows, cols);
  for (double& v : g.mutable_values()) v = rng.gumbel();
  return g;
}

Tensor gumbel_softmax(const Tensor& log_pi, double tau, const Tensor& noise) {
  if (!(tau > 0.0)) throw Error("gumbel_softmax: temperature must be positive, got " + std::to_string(tau));
  if (!log_pi.all_finite()) throw NumericError("gumbel_softmax: non-finite logits");
  return softmax(scale(add(log_pi, noise), 1.0 / tau));
}

Tensor gumbel_softmax_sample(const Tensor& log_pi, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw Error("gumbel_softmax: temperature must be positive, got " + std::to_string(tau));
  return gumbel_softmax(log_pi, tau, gumbel_noise(log_pi.rows(), log_pi.cols(), rng));
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

double cross_entropy(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("cross_entropy: length mismatch");
  double h = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) throw NumericError("cross_entropy: q has zero mass where p > 0 (index " + std::to_string(i) + ")");
    h -= p[i] * std::log(q[i]);
  }
  return h;
}

Tensor entropy_from_log_probs(const Tensor& log_probs) {
  return neg(sum_axis(mul(exp(log_probs), log_probs), 1));
}

Tensor mi_regularizer(const Tensor& log_probs, double mu, double lambda) {
  if (log_probs.rows() == 0) throw Error("mi_regularizer: empty batch");
  if (mu < 0.0 || lambda < 0.0) throw Error("mi_regularizer: coefficients must be nonnegative");
  const double m = static_cast<double>(log_probs.rows());
  Tensor marginal = mean_axis(exp(log_probs), 0);
  Tensor h_marginal = entropy_rows(marginal);
  Tensor h_points = sum(entropy_from_log_probs(log_probs));
  return sub(scale(h_marginal, mu * m), scale(h_points, lambda));
}

double mutual_information(const Tensor& probs) {
  const std::size_t r = probs.rows(), n = probs.cols();
  if (r == 0) throw Error("mutual_information: empty batch");
  std::vector<double> marginal(n, 0.0);
  double h_cond = 0.0;
  auto v = probs.values();
  for (std::size_t i = 0; i < r; ++i) {
    auto row = v.subspan(i * n, n);
    h_cond += entropy(row);
    for (std::size_t j = 0; j < n; ++j) marginal[j] += row[j];
  }
  for (double& x : marginal) x /= static_cast<double>(r);
  return entropy(marginal) - h_cond / static_cast<double>(r);
}

}  // namespace cpf
