#pragma once

#include <mps/error.hpp>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mps {

/// Dense row-major f64 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = init.size();
    cols_ = rows_ == 0 ? 0 : init.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw Error(ErrorKind::ShapeMismatch, "ragged initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) {
    assert(i < rows_ && j < cols_);
    return data_[i * cols_ + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    assert(i < rows_ && j < cols_);
    return data_[i * cols_ + j];
  }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) {
    throw Error(ErrorKind::ShapeMismatch,
                std::string(what) + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                    " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw Error(ErrorKind::ShapeMismatch, "matmul inner dimension");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  }
  return c;
}

/// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw Error(ErrorKind::ShapeMismatch, "matmul_nt inner dimension");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
  return c;
}

/// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw Error(ErrorKind::ShapeMismatch, "matmul_tn inner dimension");
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k)
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aki * b(k, j);
    }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix concat_rows(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error(ErrorKind::ShapeMismatch, "concat_rows column count");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::size_t r = 0;
  for (const auto& p : parts)
    for (std::size_t i = 0; i < p.rows(); ++i, ++r) std::ranges::copy(p.row(i), out.row(r).begin());
  return out;
}

inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) std::ranges::copy(m.row(idx[r]), out.row(r).begin());
  return out;
}

inline bool all_finite(const Matrix& m) {
  return std::ranges::all_of(m.flat(), [](double v) { return std::isfinite(v); });
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.flat()[i] - b.flat()[i]));
  return m;
}

inline constexpr double kZeroRowNorm = 1e-12;

/// N x d matrix whose rows have unit Euclidean norm. Rows are normalized on construction.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;

  explicit FeatureMatrix(Matrix raw) : data_(std::move(raw)) {
    if (data_.rows() == 0 || data_.cols() == 0)
      throw Error(ErrorKind::ShapeMismatch, "feature matrix needs N >= 1 and d >= 1");
    if (!all_finite(data_)) throw Error(ErrorKind::NonFinite, "feature matrix has non-finite entries");
    for (std::size_t i = 0; i < data_.rows(); ++i) {
      auto r = data_.row(i);
      const double n = norm2(r);
      if (n <= kZeroRowNorm) throw Error(ErrorKind::ZeroRow, "row " + std::to_string(i) + " has zero norm");
      for (double& v : r) v /= n;
    }
  }

  std::size_t n_rows() const noexcept { return data_.rows(); }
  std::size_t dim() const noexcept { return data_.cols(); }
  std::span<const double> row(std::size_t i) const { return data_.row(i); }
  const Matrix& matrix() const noexcept { return data_; }

 private:
  Matrix data_;
};

/// Pairwise inner products of unit rows.
class GramMatrix {
 public:
  GramMatrix() = default;
  explicit GramMatrix(Matrix s) : data_(std::move(s)) {
    if (data_.rows() != data_.cols()) throw Error(ErrorKind::ShapeMismatch, "gram matrix must be square");
  }
  std::size_t size() const noexcept { return data_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return data_(i, j); }
  const Matrix& matrix() const noexcept { return data_; }

 private:
  Matrix data_;
};

/// Cosine distances 1 - S.
class DistanceMatrix {
 public:
  DistanceMatrix() = default;
  explicit DistanceMatrix(Matrix d) : data_(std::move(d)) {
    if (data_.rows() != data_.cols()) throw Error(ErrorKind::ShapeMismatch, "distance matrix must be square");
  }
  std::size_t size() const noexcept { return data_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return data_(i, j); }
  const Matrix& matrix() const noexcept { return data_; }

 private:
  Matrix data_;
};

inline FeatureMatrix normalize_rows(Matrix raw) { return FeatureMatrix(std::move(raw)); }

inline GramMatrix gram(const FeatureMatrix& f) {
  const std::size_t n = f.n_rows();
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double v = dot(f.row(i), f.row(j));
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return GramMatrix(std::move(s));
}

inline DistanceMatrix cosine_distance_matrix(const GramMatrix& s) {
  Matrix d(s.size(), s.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) d(i, j) = 1.0 - s(i, j);
  return DistanceMatrix(std::move(d));
}

inline DistanceMatrix cosine_distance_matrix(const FeatureMatrix& f) { return cosine_distance_matrix(gram(f)); }

}  // namespace mps
