#pragma once

// Chart-label machinery: relaxed categorical sampling, entropies and the
// mutual-information regularizer.

#include <span>

#include "cpf/autodiff.hpp"
#include "cpf/rng.hpp"

namespace cpf {

// softmax((log_pi + g) / tau) per row with g ~ Gumbel(0, 1) drawn from rng.
Tensor gumbel_softmax_sample(const Tensor& log_pi, double tau, Rng& rng);
// Same with caller-supplied Gumbel noise (same shape as log_pi).
Tensor gumbel_softmax(const Tensor& log_pi, double tau, const Tensor& gumbel_noise);
Tensor gumbel_noise(std::size_t rows, std::size_t cols, Rng& rng);

// H[p] = -sum p log p, with 0 log 0 = 0.
double entropy(std::span<const double> p);
// H[p|q] = -sum p log q. Throws when q_i = 0 while p_i > 0.
double cross_entropy(std::span<const double> p, std::span<const double> q);

// Per-row entropy of the categorical given by log-probabilities; rows x 1.
Tensor entropy_from_log_probs(const Tensor& log_probs);

// sum_j { mu * H[mean_k pi_k] - lambda * H[pi_j] } over the rows of one
// cloud (or minibatch of one cloud); 1 x 1.
Tensor mi_regularizer(const Tensor& log_probs, double mu, double lambda);

// Empirical mutual information H[mean pi] - mean_j H[pi_j] in nats.
double mutual_information(const Tensor& probs);

}  // namespace cpf
