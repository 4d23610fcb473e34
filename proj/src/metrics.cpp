#include "cpf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <thread>

namespace cpf {

namespace {

void check_same_shape(const PointCloud& a, const PointCloud& b, const char* op) {
  if (a.dim != b.dim) throw ShapeError(std::string(op) + ": dimension mismatch");
  if (a.size() != b.size())
    throw ShapeError(std::string(op) + ": cardinality mismatch (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
}

double dist2(const PointCloud& a, std::size_t i, const PointCloud& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.dim; ++k) {
    const double d = a.at(i, k) - b.at(j, k);
    s += d * d;
  }
  return s;
}

}  // namespace

std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t n) {
  // Shortest augmenting path with potentials, 1-based internally.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> match(n);
  for (std::size_t j = 1; j <= n; ++j) match[p[j] - 1] = j - 1;
  return match;
}

std::vector<std::size_t> auction_assignment(const std::vector<double>& cost, std::size_t n) {
  const std::size_t none = std::numeric_limits<std::size_t>::max();
  double cmax = 0.0;
  for (double c : cost) cmax = std::max(cmax, c);
  if (cmax <= 0.0) {
    std::vector<std::size_t> id(n);
    for (std::size_t i = 0; i < n; ++i) id[i] = i;
    return id;
  }
  std::vector<double> price(n, 0.0);
  std::vector<std::size_t> owner(n, none), match(n, none);
  const double eps_final = cmax * 1e-7 / static_cast<double>(n);
  const std::size_t budget = 200 * n;
  for (double eps = cmax / 4.0;; eps = std::max(eps / 5.0, eps_final)) {
    std::fill(owner.begin(), owner.end(), none);
    std::fill(match.begin(), match.end(), none);
    std::vector<std::size_t> queue(n);
    for (std::size_t i = 0; i < n; ++i) queue[i] = n - 1 - i;
    std::size_t bids = 0;
    while (!queue.empty() && bids < budget) {
      const std::size_t i = queue.back();
      queue.pop_back();
      ++bids;
      double best = -std::numeric_limits<double>::infinity(), second = best;
      std::size_t bj = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double val = -cost[i * n + j] - price[j];
        if (val > best) {
          second = best;
          best = val;
          bj = j;
        } else if (val > second) {
          second = val;
        }
      }
      const double inc = (n > 1 ? best - second : 0.0) + eps;
      price[bj] += inc;
      if (owner[bj] != none) {
        match[owner[bj]] = none;
        queue.push_back(owner[bj]);
      }
      owner[bj] = i;
      match[i] = bj;
    }
    if (!queue.empty()) {
      // Budget exhausted: hand out the remaining objects greedily.
      for (std::size_t i : queue) {
        std::size_t bj = none;
        for (std::size_t j = 0; j < n; ++j)
          if (owner[j] == none && (bj == none || cost[i * n + j] < cost[i * n + bj])) bj = j;
        owner[bj] = i;
        match[i] = bj;
      }
    }
    if (eps <= eps_final) break;
  }
  return match;
}

EmdResult emd(const PointCloud& a, const PointCloud& b) {
  check_same_shape(a, b, "emd");
  const std::size_t n = a.size();
  if (n == 0) return {};
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = std::sqrt(dist2(a, i, b, j));
  const bool exact = n <= kExactEmdLimit;
  const auto match = exact ? hungarian(cost, n) : auction_assignment(cost, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + match[i]];
  return {total, exact};
}

double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.size() == 0 || b.size() == 0) throw Error("chamfer: empty cloud");
  if (a.dim != b.dim) throw ShapeError("chamfer: dimension mismatch");
  auto one_way = [](const PointCloud& p, const PointCloud& q) {
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < q.size(); ++j) best = std::min(best, dist2(p, i, q, j));
      total += best;
    }
    return total;
  };
  return one_way(a, b) + one_way(b, a);
}

std::string to_string(CloudDistance d) { return d == CloudDistance::emd ? "EMD" : "CD"; }

CloudDistance parse_cloud_distance(const std::string& s) {
  if (s == "EMD" || s == "emd") return CloudDistance::emd;
  if (s == "CD" || s == "cd" || s == "chamfer") return CloudDistance::chamfer;
  throw Error("unknown distance '" + s + "' (expected EMD or CD)");
}

DistanceMatrix pairwise(const std::vector<PointCloud>& a, const std::vector<PointCloud>& b, CloudDistance d,
                        unsigned threads) {
  DistanceMatrix m;
  m.rows = a.size();
  m.cols = b.size();
  m.values.assign(m.rows * m.cols, 0.0);
  const std::size_t total = m.rows * m.cols;
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(total, 1)));
  std::vector<char> exact(total, 1);
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t k = begin; k < total; k += step) {
      const auto& x = a[k / m.cols];
      const auto& y = b[k % m.cols];
      if (d == CloudDistance::emd) {
        EmdResult r = emd(x, y);
        m.values[k] = r.value;
        exact[k] = r.exact;
      } else {
        m.values[k] = chamfer(x, y);
      }
    }
  };
  if (threads <= 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& t : pool) t.join();
  }
  m.exact = std::all_of(exact.begin(), exact.end(), [](char c) { return c != 0; });
  return m;
}

double one_nn_accuracy(const DistanceMatrix& all, std::size_t n1) {
  const std::size_t n = all.rows;
  if (n != all.cols || n1 == 0 || n1 >= n) throw ShapeError("1-NNA: need a square matrix over both sets");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (best == n || all(i, j) < all(i, best)) best = j;
    }
    if ((i < n1) == (best < n1)) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

SetMetric one_nn_accuracy(const std::vector<PointCloud>& s1, const std::vector<PointCloud>& s2, CloudDistance d) {
  if (s1.size() != s2.size() || s1.empty())
    throw ShapeError("1-NNA: sets must be nonempty and of equal size (" + std::to_string(s1.size()) + " vs " +
                     std::to_string(s2.size()) + ")");
  std::vector<PointCloud> all = s1;
  all.insert(all.end(), s2.begin(), s2.end());
  DistanceMatrix m = pairwise(all, all, d);
  return {one_nn_accuracy(m, s1.size()), m.exact};
}

JsdResult jsd(const std::vector<PointCloud>& s1, const std::vector<PointCloud>& s2, std::size_t bins) {
  if (s1.empty() || s2.empty()) throw Error("jsd: empty set");
  const std::size_t dim = s1.front().dim;
  std::size_t cells = 1;
  for (std::size_t k = 0; k < dim; ++k) cells *= bins;
  JsdResult res;
  auto histogram = [&](const std::vector<PointCloud>& set) {
    std::vector<double> h(cells, 0.0);
    double total = 0.0;
    for (const auto& c : set) {
      if (c.dim != dim) throw ShapeError("jsd: mixed dimensions");
      for (std::size_t i = 0; i < c.size(); ++i) {
        std::size_t idx = 0;
        bool clipped = false;
        for (std::size_t k = 0; k < dim; ++k) {
          const double x = c.at(i, k);
          if (x < -1.0 || x > 1.0) clipped = true;
          auto b = static_cast<long long>(std::floor((x + 1.0) / 2.0 * static_cast<double>(bins)));
          b = std::clamp<long long>(b, 0, static_cast<long long>(bins) - 1);
          idx = idx * bins + static_cast<std::size_t>(b);
        }
        if (clipped) ++res.clipped;
        h[idx] += 1.0;
        total += 1.0;
      }
    }
    if (total == 0.0) throw Error("jsd: set has no points");
    for (double& v : h) v /= total;
    return h;
  };
  const auto p = histogram(s1), q = histogram(s2);
  double kl_p = 0.0, kl_q = 0.0;
  for (std::size_t i = 0; i < cells; ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) kl_p += p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) kl_q += q[i] * std::log(q[i] / m);
  }
  res.value = 0.5 * (kl_p + kl_q);
  return res;
}

MmdCov mmd_cov(const DistanceMatrix& g2r) {
  if (g2r.rows == 0 || g2r.cols == 0) throw Error("mmd/cov: empty set");
  MmdCov out;
  double total = 0.0;
  for (std::size_t r = 0; r < g2r.cols; ++r) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < g2r.rows; ++g) best = std::min(best, g2r(g, r));
    total += best;
  }
  out.mmd = total / static_cast<double>(g2r.cols);
  std::vector<char> covered(g2r.cols, 0);
  for (std::size_t g = 0; g < g2r.rows; ++g) {
    std::size_t best = 0;
    for (std::size_t r = 1; r < g2r.cols; ++r)
      if (g2r(g, r) < g2r(g, best)) best = r;
    covered[best] = 1;
  }
  out.cov = static_cast<double>(std::count(covered.begin(), covered.end(), 1)) / static_cast<double>(g2r.cols);
  out.exact = g2r.exact;
  return out;
}

MmdCov mmd_cov(const std::vector<PointCloud>& generated, const std::vector<PointCloud>& reference, CloudDistance d) {
  if (generated.empty() || reference.empty()) throw Error("mmd/cov: empty set");
  return mmd_cov(pairwise(generated, reference, d));
}

ClusteringScores clustering_scores(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size())
    throw ShapeError("clustering_scores: length mismatch (" + std::to_string(predicted.size()) + " vs " +
                     std::to_string(truth.size()) + ")");
  if (predicted.empty()) throw Error("clustering_scores: no labels");
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> pc, tc;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    joint[{predicted[i], truth[i]}] += 1.0;
    pc[predicted[i]] += 1.0;
    tc[truth[i]] += 1.0;
  }
  const double n = static_cast<double>(truth.size());
  // Purity: each predicted cluster votes for its majority class.
  std::map<int, double> best;
  for (const auto& [key, c] : joint) best[key.first] = std::max(best[key.first], c);
  double pur = 0.0;
  for (const auto& [k, c] : best) pur += c;
  auto h = [n](const std::map<int, double>& m) {
    double s = 0.0;
    for (const auto& [k, c] : m) s -= (c / n) * std::log(c / n);
    return s;
  };
  double mi = 0.0;
  for (const auto& [key, c] : joint) mi += (c / n) * std::log(c * n / (pc[key.first] * tc[key.second]));
  const double hp = h(pc), ht = h(tc);
  ClusteringScores s;
  s.purity = pur / n;
  s.nmi = (hp + ht) > 0.0 ? std::clamp(2.0 * mi / (hp + ht), 0.0, 1.0) : 1.0;
  return s;
}

}  // namespace cpf
