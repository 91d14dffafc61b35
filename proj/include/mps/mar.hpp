#pragma once

// Manifold alignment regularization: L1 discrepancy between Gram matrices of
// frozen and tuned features, at batch level ([CLS] features) and within each
// sample ([CLS] + patch tokens).

#include <mps/linalg.hpp>

#include <cmath>
#include <vector>

namespace mps::mar {

struct BatchPair {
  FeatureMatrix frozen_cls;
  FeatureMatrix tuned_cls;
};

/// Per-sample (M+1) x d token sets; row 0 is the [CLS] token.
struct TokenPair {
  std::vector<FeatureMatrix> frozen_tokens;
  std::vector<FeatureMatrix> tuned_tokens;
};

namespace detail {

inline double mean_abs_gram_diff(const FeatureMatrix& a, const FeatureMatrix& b) {
  require_same_shape(a.matrix(), b.matrix(), "gram alignment");
  const GramMatrix sa = gram(a), sb = gram(b);
  const std::size_t n = sa.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) total += std::abs(sa(i, j) - sb(i, j));
  return total / static_cast<double>(n * n);
}

inline double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// d/dX of weight * Sum_ij |(X X^T)_ij - S_ij| for unit rows X, then pulled back
// through row normalization of the raw rows.
inline Matrix gram_l1_grad(const Matrix& raw, const GramMatrix& target, double weight) {
  const FeatureMatrix x(raw);
  const GramMatrix s = gram(x);
  const std::size_t n = s.size(), d = x.dim();
  Matrix g(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) g(i, j) = weight * sign0(s(i, j) - target(i, j));
  // dL/dZ = (G + G^T) Z
  Matrix dz(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double c = g(i, j) + g(j, i);
      if (c == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) dz(i, k) += c * x.row(j)[k];
    }
  // dz/draw = (I - z z^T) / |raw|
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = norm2(raw.row(i));
    const double proj = dot(x.row(i), dz.row(i));
    for (std::size_t k = 0; k < d; ++k) out(i, k) = (dz(i, k) - proj * x.row(i)[k]) / r;
  }
  return out;
}

}  // namespace detail

inline double mar_global(const BatchPair& batch) {
  return detail::mean_abs_gram_diff(batch.frozen_cls, batch.tuned_cls);
}

inline double mar_local(const TokenPair& tokens) {
  const std::size_t n = tokens.frozen_tokens.size();
  if (n == 0 || tokens.tuned_tokens.size() != n)
    throw Error(ErrorKind::ShapeMismatch, "token pair needs equal, nonzero sample counts");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    total += detail::mean_abs_gram_diff(tokens.frozen_tokens[i], tokens.tuned_tokens[i]);
  return total / static_cast<double>(n);
}

inline double mar_total(const BatchPair& batch, const TokenPair& tokens) {
  return mar_global(batch) + mar_local(tokens);
}

/// Gradients of mar_total with respect to raw (pre-normalization) tuned features.
struct MarGradient {
  Matrix cls;                  // N x d
  std::vector<Matrix> tokens;  // N entries of (M+1) x d
};

/// Closed-form (sub)gradient, with sign(0) taken as 0.
inline MarGradient mar_gradient(const FeatureMatrix& frozen_cls, const Matrix& tuned_cls_raw,
                                const std::vector<FeatureMatrix>& frozen_tokens,
                                const std::vector<Matrix>& tuned_tokens_raw) {
  require_same_shape(frozen_cls.matrix(), tuned_cls_raw, "mar_gradient cls");
  const std::size_t n = frozen_tokens.size();
  if (n != tuned_tokens_raw.size() || n != frozen_cls.n_rows())
    throw Error(ErrorKind::ShapeMismatch, "mar_gradient sample counts");
  MarGradient out;
  const double ng = static_cast<double>(frozen_cls.n_rows());
  out.cls = detail::gram_l1_grad(tuned_cls_raw, gram(frozen_cls), 1.0 / (ng * ng));
  out.tokens.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    require_same_shape(frozen_tokens[i].matrix(), tuned_tokens_raw[i], "mar_gradient tokens");
    const double m1 = static_cast<double>(frozen_tokens[i].n_rows());
    out.tokens.push_back(detail::gram_l1_grad(tuned_tokens_raw[i], gram(frozen_tokens[i]),
                                              1.0 / (static_cast<double>(n) * m1 * m1)));
  }
  return out;
}

}  // namespace mps::mar
