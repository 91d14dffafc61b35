#pragma once

// Geometry and prediction-shift metrics used to compare a model before and
// after fine-tuning.

#include <mps/linalg.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mps::metrics {

/// Average ranks (1-based), ties share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorKind::DegenerateInput, "constant vector has no correlation");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::ShapeMismatch, "spearman needs equal lengths");
  if (x.size() < 2) throw Error(ErrorKind::DegenerateInput, "spearman needs at least 2 values");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  return pearson(rx, ry);
}

/// Spearman correlation of the strict upper triangles of 1 - S_a and 1 - S_b.
inline double rsa(const GramMatrix& a, const GramMatrix& b) {
  require_same_shape(a.matrix(), b.matrix(), "rsa");
  const std::size_t n = a.size();
  if (n < 3) throw Error(ErrorKind::DegenerateInput, "rsa needs at least 3 samples");
  std::vector<double> da, db;
  da.reserve(n * (n - 1) / 2);
  db.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      da.push_back(1.0 - a(i, j));
      db.push_back(1.0 - b(i, j));
    }
  return spearman(da, db);
}

namespace detail {

struct Clusters {
  std::vector<int> ids;                  // distinct labels, ascending
  std::vector<std::size_t> member_of;    // cluster slot per sample
  std::vector<std::size_t> sizes;
};

inline Clusters group(std::span<const int> labels) {
  Clusters c;
  c.ids.assign(labels.begin(), labels.end());
  std::ranges::sort(c.ids);
  c.ids.erase(std::unique(c.ids.begin(), c.ids.end()), c.ids.end());
  c.sizes.assign(c.ids.size(), 0);
  c.member_of.reserve(labels.size());
  for (int l : labels) {
    const auto slot = static_cast<std::size_t>(std::ranges::lower_bound(c.ids, l) - c.ids.begin());
    c.member_of.push_back(slot);
    ++c.sizes[slot];
  }
  return c;
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace detail

/// (between-SS / (k-1)) / (within-SS / (N-k)). Returns +infinity when within-SS is 0.
inline double calinski_harabasz(const Matrix& points, std::span<const int> labels) {
  if (points.rows() != labels.size()) throw Error(ErrorKind::ShapeMismatch, "label count");
  const auto c = detail::group(labels);
  const std::size_t n = points.rows(), k = c.ids.size(), d = points.cols();
  if (k < 2) throw Error(ErrorKind::DegenerateClustering, "need at least 2 classes");
  if (n <= k) throw Error(ErrorKind::DegenerateClustering, "need more samples than classes");

  Matrix centroids(k, d);
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      centroids(c.member_of[i], j) += points(i, j);
      mean[j] += points(i, j);
    }
  for (std::size_t s = 0; s < k; ++s)
    for (std::size_t j = 0; j < d; ++j) centroids(s, j) /= static_cast<double>(c.sizes[s]);
  for (double& v : mean) v /= static_cast<double>(n);

  double between = 0.0, within = 0.0;
  for (std::size_t s = 0; s < k; ++s) between += static_cast<double>(c.sizes[s]) * detail::sq_dist(centroids.row(s), mean);
  for (std::size_t i = 0; i < n; ++i) within += detail::sq_dist(points.row(i), centroids.row(c.member_of[i]));
  if (within == 0.0) return std::numeric_limits<double>::infinity();
  return (between / static_cast<double>(k - 1)) / (within / static_cast<double>(n - k));
}

inline double calinski_harabasz(const FeatureMatrix& f, std::span<const int> labels) {
  return calinski_harabasz(f.matrix(), labels);
}

/// Per-point silhouette values with Euclidean distance; points in singleton clusters score 0.
inline std::vector<double> silhouette_samples(const Matrix& points, std::span<const int> labels) {
  if (points.rows() != labels.size()) throw Error(ErrorKind::ShapeMismatch, "label count");
  const auto c = detail::group(labels);
  const std::size_t n = points.rows(), k = c.ids.size();
  if (k < 2) throw Error(ErrorKind::DegenerateClustering, "need at least 2 classes");

  std::vector<double> out(n, 0.0);
  std::vector<double> sums(k);
  for (std::size_t i = 0; i < n; ++i) {
    std::ranges::fill(sums, 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sums[c.member_of[j]] += std::sqrt(detail::sq_dist(points.row(i), points.row(j)));
    const std::size_t own = c.member_of[i];
    if (c.sizes[own] < 2) continue;
    const double a = sums[own] / static_cast<double>(c.sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < k; ++s)
      if (s != own) b = std::min(b, sums[s] / static_cast<double>(c.sizes[s]));
    const double m = std::max(a, b);
    out[i] = m > 0.0 ? (b - a) / m : 0.0;
  }
  return out;
}

inline double silhouette(const Matrix& points, std::span<const int> labels) {
  const auto s = silhouette_samples(points, labels);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

inline double silhouette(const FeatureMatrix& f, std::span<const int> labels) { return silhouette(f.matrix(), labels); }

inline constexpr double kProbabilityTol = 1e-9;

inline void require_probability(std::span<const double> p) {
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw Error(ErrorKind::NotAProbability, "negative or non-finite probability");
    s += v;
  }
  if (std::abs(s - 1.0) > kProbabilityTol) throw Error(ErrorKind::NotAProbability, "probabilities do not sum to 1");
}

/// sqrt(1 - Bhattacharyya coefficient).
inline double hellinger(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error(ErrorKind::ShapeMismatch, "hellinger needs equal lengths");
  require_probability(p);
  require_probability(q);
  double bc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) bc += std::sqrt(p[i] * q[i]);
  return std::sqrt(std::max(0.0, 1.0 - bc));
}

/// Mean over samples of 1 - <z_i, z'_i>.
inline double cosine_shift(const FeatureMatrix& z, const FeatureMatrix& z_prime) {
  require_same_shape(z.matrix(), z_prime.matrix(), "cosine_shift");
  double total = 0.0;
  for (std::size_t i = 0; i < z.n_rows(); ++i) total += 1.0 - dot(z.row(i), z_prime.row(i));
  return total / static_cast<double>(z.n_rows());
}

/// A metric value or the reason it could not be computed.
struct Metric {
  std::optional<double> value;
  std::string skip_reason;

  static Metric of(double v) { return {v, {}}; }
  static Metric skipped(std::string why) { return {std::nullopt, std::move(why)}; }
  bool present() const { return value.has_value(); }
};

/// Runs f and converts library errors into an explicit skip.
template <class F>
Metric try_metric(F&& f) {
  try {
    return Metric::of(f());
  } catch (const Error& e) {
    return Metric::skipped(std::string(to_string(e.kind())));
  }
}

inline std::string format_value(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string format_metric(const Metric& m) {
  return m.present() ? format_value(*m.value) : "skipped:" + m.skip_reason;
}

struct MetricReport {
  Metric rsa = Metric::skipped("not computed");
  Metric calinski_harabasz = Metric::skipped("not computed");
  Metric silhouette = Metric::skipped("not computed");
  Metric hellinger_mean = Metric::skipped("not computed");
  Metric spearman_logits_mean = Metric::skipped("not computed");
  Metric cosine_shift_mean = Metric::skipped("not computed");

  std::vector<std::pair<std::string, const Metric*>> fields() const {
    return {{"rsa", &rsa},
            {"calinski_harabasz", &calinski_harabasz},
            {"silhouette", &silhouette},
            {"hellinger_mean", &hellinger_mean},
            {"spearman_logits_mean", &spearman_logits_mean},
            {"cosine_shift_mean", &cosine_shift_mean}};
  }

  /// One `metric=value` line per field, 9 significant digits.
  std::string serialize(const std::string& prefix = "") const {
    std::string out;
    for (const auto& [name, m] : fields()) out += prefix + name + "=" + format_metric(*m) + "\n";
    return out;
  }
};

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::ranges::max_element(logits);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

/// Mean Hellinger distance between row-wise softmax distributions.
inline double hellinger_mean(const Matrix& logits_a, const Matrix& logits_b) {
  require_same_shape(logits_a, logits_b, "hellinger_mean");
  double total = 0.0;
  for (std::size_t i = 0; i < logits_a.rows(); ++i) total += hellinger(softmax(logits_a.row(i)), softmax(logits_b.row(i)));
  return total / static_cast<double>(logits_a.rows());
}

/// Mean per-sample Spearman correlation of logits; samples whose logits are constant are skipped.
inline double spearman_rows_mean(const Matrix& logits_a, const Matrix& logits_b) {
  require_same_shape(logits_a, logits_b, "spearman_rows_mean");
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < logits_a.rows(); ++i) {
    try {
      total += spearman(logits_a.row(i), logits_b.row(i));
      ++used;
    } catch (const Error&) {
    }
  }
  if (used == 0) throw Error(ErrorKind::DegenerateInput, "every sample has constant logits");
  return total / static_cast<double>(used);
}

}  // namespace mps::metrics
