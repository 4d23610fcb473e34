#pragma once

// Point-set and cloud-set evaluation metrics. Natural logarithms throughout;
// nearest-neighbour ties go to the lowest index.

#include <string>
#include <vector>

#include "cpf/data.hpp"

namespace cpf {

constexpr std::size_t kExactEmdLimit = 512;

struct EmdResult {
  double value = 0.0;
  bool exact = true;
};

// Minimum over bijections of the summed Euclidean distances. Exact
// (Hungarian) up to kExactEmdLimit points, epsilon-scaling auction above.
EmdResult emd(const PointCloud& a, const PointCloud& b);
// Optimal assignment for a square cost matrix (row-major); returns the
// column matched to each row.
std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t n);
std::vector<std::size_t> auction_assignment(const std::vector<double>& cost, std::size_t n);

double chamfer(const PointCloud& a, const PointCloud& b);

enum class CloudDistance { emd, chamfer };
std::string to_string(CloudDistance d);
CloudDistance parse_cloud_distance(const std::string& s);

struct DistanceMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
  bool exact = true;
  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

// d(a_i, b_j) for every pair, computed on worker threads.
DistanceMatrix pairwise(const std::vector<PointCloud>& a, const std::vector<PointCloud>& b, CloudDistance d,
                        unsigned threads = 0);

struct SetMetric {
  double value = 0.0;
  bool exact = true;
};

// Percentage of clouds whose nearest neighbour in the union (self excluded)
// comes from their own set.
SetMetric one_nn_accuracy(const std::vector<PointCloud>& s1, const std::vector<PointCloud>& s2, CloudDistance d);
// Same from a precomputed (n1 + n2) square distance matrix; the first n1
// rows belong to the first set.
double one_nn_accuracy(const DistanceMatrix& all, std::size_t n1);

struct JsdResult {
  double value = 0.0;
  std::size_t clipped = 0;  // points outside [-1, 1]^d counted in boundary bins
};
JsdResult jsd(const std::vector<PointCloud>& s1, const std::vector<PointCloud>& s2, std::size_t bins = 28);

struct MmdCov {
  double mmd = 0.0;
  double cov = 0.0;  // fraction in (0, 1]
  bool exact = true;
};
MmdCov mmd_cov(const std::vector<PointCloud>& generated, const std::vector<PointCloud>& reference, CloudDistance d);
// dist(g, r) with generated clouds as rows.
MmdCov mmd_cov(const DistanceMatrix& gen_to_ref);

struct ClusteringScores {
  double nmi = 0.0;
  double purity = 0.0;
};
// NMI = 2 I(Y; Yhat) / (H(Y) + H(Yhat)); 1 when both labelings are constant.
ClusteringScores clustering_scores(const std::vector<int>& predicted, const std::vector<int>& truth);

}  // namespace cpf
