#pragma once

// Metric-measure spaces over cosine distance, transport couplings, the
// Gromov-Wasserstein coupling cost and its Gram-matrix upper bound.

#include <mps/linalg.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace mps::gw {

inline constexpr double kMarginalTol = 1e-10;
inline constexpr double kWeightSumTol = 1e-12;

struct MetricSpace {
  DistanceMatrix distances;
  std::vector<double> weights;

  std::size_t size() const noexcept { return distances.size(); }

  static MetricSpace uniform(DistanceMatrix d) {
    const std::size_t n = d.size();
    if (n == 0) throw Error(ErrorKind::ShapeMismatch, "metric space needs at least one point");
    return {std::move(d), std::vector<double>(n, 1.0 / static_cast<double>(n))};
  }

  static MetricSpace from_features(const FeatureMatrix& f) { return uniform(cosine_distance_matrix(f)); }

  bool is_uniform() const {
    const double w = 1.0 / static_cast<double>(size());
    return std::ranges::all_of(weights, [w](double v) { return std::abs(v - w) <= kWeightSumTol; });
  }
};

/// Transport plan between two discrete measures.
struct Coupling {
  Matrix plan;
};

enum class CouplingKind { Permutation, Natural, Product };

inline std::string to_string(CouplingKind k) {
  switch (k) {
    case CouplingKind::Permutation: return "permutation";
    case CouplingKind::Natural: return "natural";
    case CouplingKind::Product: return "product";
  }
  return "unknown";
}

struct GwEstimate {
  double value = 0.0;  // (min searched cost)^(1/p)
  double cost = 0.0;   // min searched cost, before the root
  int order_p = 1;
  Coupling coupling;
  CouplingKind kind = CouplingKind::Permutation;
  std::vector<std::size_t> permutation;  // filled when kind == Permutation
  std::uint64_t permutation_rank = 0;    // lexicographic rank of `permutation`
  std::string method;
};

inline Coupling coupling_natural(std::size_t n) {
  if (n == 0) throw Error(ErrorKind::ShapeMismatch, "coupling_natural needs n >= 1");
  Matrix p(n, n);
  for (std::size_t i = 0; i < n; ++i) p(i, i) = 1.0 / static_cast<double>(n);
  return {std::move(p)};
}

inline Coupling coupling_product(std::span<const double> mu, std::span<const double> nu) {
  Matrix p(mu.size(), nu.size());
  for (std::size_t i = 0; i < mu.size(); ++i)
    for (std::size_t k = 0; k < nu.size(); ++k) p(i, k) = mu[i] * nu[k];
  return {std::move(p)};
}

/// plan(i, perm[i]) = 1/n.
inline Coupling coupling_permutation(std::span<const std::size_t> perm) {
  const std::size_t n = perm.size();
  Matrix p(n, n);
  for (std::size_t i = 0; i < n; ++i) p(i, perm[i]) = 1.0 / static_cast<double>(n);
  return {std::move(p)};
}

inline bool validate_coupling(const Coupling& pi, std::span<const double> mu, std::span<const double> nu) {
  const Matrix& p = pi.plan;
  if (p.rows() != mu.size() || p.cols() != nu.size()) return false;
  for (double v : p.flat())
    if (!(v >= -1e-15)) return false;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < p.cols(); ++k) s += p(i, k);
    if (std::abs(s - mu[i]) > kMarginalTol) return false;
  }
  for (std::size_t k = 0; k < p.cols(); ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i) s += p(i, k);
    if (std::abs(s - nu[k]) > kMarginalTol) return false;
  }
  return true;
}

inline void check_order(int p) {
  if (p != 1 && p != 2) throw Error(ErrorKind::BadOrder, "order p must be 1 or 2, got " + std::to_string(p));
}

inline double pow_order(double x, int p) { return p == 1 ? std::abs(x) : x * x; }

/// Sum_{i,j,k,l} |D_X[i,j] - D_Y[k,l]|^p pi_ik pi_jl, i.e. the GW objective before the 1/p root.
inline double coupling_cost(const MetricSpace& x, const MetricSpace& y, const Coupling& pi, int p) {
  check_order(p);
  const std::size_t n = x.size(), m = y.size();
  if (pi.plan.rows() != n || pi.plan.cols() != m)
    throw Error(ErrorKind::ShapeMismatch, "coupling shape does not match the metric spaces");
  const Matrix& plan = pi.plan;
  const Matrix& dx = x.distances.matrix();
  const Matrix& dy = y.distances.matrix();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < m; ++k) {
      const double pik = plan(i, k);
      if (pik == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t l = 0; l < m; ++l) {
          const double pjl = plan(j, l);
          if (pjl == 0.0) continue;
          total += pow_order(dx(i, j) - dy(k, l), p) * pik * pjl;
        }
      }
    }
  }
  return total;
}

/// (1/N^2) Sum_{i,j} |S'_ij - S_ij|^p.
inline double gram_bound(const GramMatrix& s, const GramMatrix& s_prime, int p) {
  check_order(p);
  require_same_shape(s.matrix(), s_prime.matrix(), "gram_bound");
  const std::size_t n = s.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) total += pow_order(s_prime(i, j) - s(i, j), p);
  return total / static_cast<double>(n * n);
}

inline constexpr std::size_t kDefaultMaxExactN = 6;

/// Certified upper bound on GW_p: minimum over all N! permutation couplings,
/// the natural coupling and the product coupling. Ties keep the
/// lexicographically smallest permutation.
inline GwEstimate gw_estimate(const MetricSpace& x, const MetricSpace& y, int p,
                              std::size_t max_exact_n = kDefaultMaxExactN) {
  check_order(p);
  const std::size_t n = x.size();
  if (y.size() != n) throw Error(ErrorKind::ShapeMismatch, "gw_estimate requires equal-size spaces");
  if (n > max_exact_n)
    throw Error(ErrorKind::TooLarge, "n = " + std::to_string(n) + " exceeds the exact-search limit of " +
                                         std::to_string(max_exact_n) + "; subsample to at most that many points");
  if (!x.is_uniform() || !y.is_uniform())
    throw Error(ErrorKind::WeightMismatch, "gw_estimate only supports uniform measures");

  const Matrix& dx = x.distances.matrix();
  const Matrix& dy = y.distances.matrix();
  const double w2 = 1.0 / static_cast<double>(n * n);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::vector<std::size_t> best_perm = perm;
  double best = std::numeric_limits<double>::infinity();
  std::uint64_t rank = 0, best_rank = 0;
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) c += pow_order(dx(i, j) - dy(perm[i], perm[j]), p);
    c *= w2;
    if (c < best) {
      best = c;
      best_perm = perm;
      best_rank = rank;
    }
    ++rank;
  } while (std::ranges::next_permutation(perm).found);

  GwEstimate est;
  est.order_p = p;
  est.method = "permutations(" + std::to_string(rank) + ")+natural+product";
  est.kind = CouplingKind::Permutation;
  est.permutation = best_perm;
  est.permutation_rank = best_rank;
  est.coupling = coupling_permutation(best_perm);

  const Coupling natural = coupling_natural(n);
  const double natural_cost = coupling_cost(x, y, natural, p);
  if (natural_cost < best) {
    best = natural_cost;
    est.kind = CouplingKind::Natural;
    est.coupling = natural;
    est.permutation.clear();
  }
  Coupling product = coupling_product(x.weights, y.weights);
  const double product_cost = coupling_cost(x, y, product, p);
  if (product_cost < best) {
    best = product_cost;
    est.kind = CouplingKind::Product;
    est.coupling = std::move(product);
    est.permutation.clear();
  }
  est.cost = std::max(best, 0.0);
  est.value = p == 1 ? est.cost : std::sqrt(est.cost);
  return est;
}

}  // namespace mps::gw
