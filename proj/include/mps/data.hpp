#pragma once

// Synthetic few-shot data: class-conditional Gaussian token fields, view
// augmentation, K-shot splits and the CSV interchange format.

#include <mps/linalg.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace mps::data {

struct Dataset {
  std::vector<Matrix> samples;  // each patch_count x patch_input_dim
  std::vector<int> labels;
  int classes = 0;

  std::size_t size() const noexcept { return samples.size(); }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.classes = classes;
    for (std::size_t i : idx) {
      out.samples.push_back(samples[i]);
      out.labels.push_back(labels[i]);
    }
    return out;
  }
};

struct SynthConfig {
  int classes = 8;
  int per_class = 64;
  int patch_count = 16;
  int patch_input_dim = 8;
  double class_scale = 1.0;  // spread of class mean fields
  double position_spread = 0.5;  // per-position deviation from the class's shared token mean
  double noise = 0.7;        // per-sample token noise
  std::uint64_t seed = 7;

  void validate() const {
    if (classes < 2) throw Error(ErrorKind::BadFlag, "classes must be >= 2");
    if (per_class < 1 || patch_count < 1 || patch_input_dim < 1)
      throw Error(ErrorKind::BadFlag, "per_class, patch_count and patch_input_dim must be >= 1");
    if (!(noise >= 0.0) || !(class_scale > 0.0) || !(position_spread >= 0.0))
      throw Error(ErrorKind::BadFlag, "noise >= 0, class_scale > 0 and position_spread >= 0");
  }
};

/// Class mean fields are fixed by cfg.seed; each draw uses its own stream.
class SyntheticSource {
 public:
  explicit SyntheticSource(SynthConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (int c = 0; c < cfg_.classes; ++c) {
      Matrix m(static_cast<std::size_t>(cfg_.patch_count), static_cast<std::size_t>(cfg_.patch_input_dim));
      std::vector<double> shared(m.cols());
      for (double& v : shared) v = n01(rng);
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j)
          m(i, j) = cfg_.class_scale * (shared[j] + cfg_.position_spread * n01(rng));
      means_.push_back(std::move(m));
    }
  }

  /// per_class samples of every class, class-major order.
  Dataset draw(int per_class, std::uint64_t stream) const {
    std::mt19937_64 rng(cfg_.seed ^ (0x9E3779B97F4A7C15ull * (stream + 1)));
    std::normal_distribution<double> n01(0.0, 1.0);
    Dataset d;
    d.classes = cfg_.classes;
    for (int c = 0; c < cfg_.classes; ++c) {
      for (int i = 0; i < per_class; ++i) {
        Matrix s = means_[static_cast<std::size_t>(c)];
        for (double& v : s.flat()) v += cfg_.noise * n01(rng);
        d.samples.push_back(std::move(s));
        d.labels.push_back(c);
      }
    }
    return d;
  }

  const SynthConfig& config() const noexcept { return cfg_; }

 private:
  SynthConfig cfg_;
  std::vector<Matrix> means_;
};

/// Per-position mean over all samples, irrespective of class.
inline Matrix token_mean(const Dataset& d) {
  if (d.samples.empty()) throw Error(ErrorKind::ShapeMismatch, "empty dataset");
  Matrix m(d.samples.front().rows(), d.samples.front().cols());
  for (const auto& s : d.samples)
    for (std::size_t i = 0; i < m.size(); ++i) m.flat()[i] += s.flat()[i];
  for (double& v : m.flat()) v /= static_cast<double>(d.samples.size());
  return m;
}

struct AugmentConfig {
  double sigma = 0.05;
  double keep_min = 0.3;
  double keep_max = 1.0;
};

namespace detail {
inline Matrix make_view(const Matrix& sample, const Matrix& fill, const AugmentConfig& cfg, std::mt19937_64& rng) {
  const std::size_t m = sample.rows();
  std::uniform_real_distribution<double> keep_dist(cfg.keep_min, cfg.keep_max);
  const double frac = cfg.keep_min >= cfg.keep_max ? cfg.keep_max : keep_dist(rng);
  const auto kept = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(frac * static_cast<double>(m))), 1, m);
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = i;
  std::ranges::shuffle(order, rng);
  std::vector<char> keep(m, 0);
  for (std::size_t i = 0; i < kept; ++i) keep[order[i]] = 1;

  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix view = sample;
  for (std::size_t r = 0; r < m; ++r) {
    if (!keep[r]) {
      std::ranges::copy(fill.row(r), view.row(r).begin());
      continue;
    }
    if (cfg.sigma > 0.0)
      for (double& v : view.row(r)) v += cfg.sigma * n01(rng);
  }
  return view;
}
}  // namespace detail

/// Two stochastic views: random token masking (masked tokens take the
/// class-unconditional mean) plus Gaussian jitter on kept tokens.
inline std::pair<Matrix, Matrix> augment(const Matrix& sample, const Matrix& fill, const AugmentConfig& cfg,
                                         std::uint64_t seed) {
  require_same_shape(sample, fill, "augment fill");
  std::mt19937_64 rng(seed);
  Matrix a = detail::make_view(sample, fill, cfg, rng);
  Matrix b = detail::make_view(sample, fill, cfg, rng);
  return {std::move(a), std::move(b)};
}

struct FewShotSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  int classes = 0;
};

/// Exactly k samples per class for training; the remainder is the test split.
/// Every class must keep at least one test sample.
inline FewShotSplit sample_k_shot(std::span<const int> labels, int k, std::uint64_t seed) {
  if (k < 1) throw Error(ErrorKind::BadConfig, "k must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  FewShotSplit split;
  split.classes = static_cast<int>(by_class.size());
  std::mt19937_64 rng(seed);
  for (auto& [label, idx] : by_class) {
    if (idx.size() <= static_cast<std::size_t>(k))
      throw Error(ErrorKind::InsufficientSamples, "class " + std::to_string(label) + " has " +
                                                      std::to_string(idx.size()) + " samples, need more than k = " +
                                                      std::to_string(k));
    std::ranges::shuffle(idx, rng);
    split.train.insert(split.train.end(), idx.begin(), idx.begin() + k);
    split.test.insert(split.test.end(), idx.begin() + k, idx.end());
  }
  std::ranges::sort(split.train);
  std::ranges::sort(split.test);
  return split;
}

// ------------------------------------------------------------------- CSV

/// `id,label,f0,...,f{d-1}` rows.
struct EmbeddingFile {
  std::vector<std::string> ids;
  std::vector<int> labels;
  Matrix values;  // n x d

  std::size_t n() const noexcept { return ids.size(); }
  std::size_t dim() const noexcept { return values.cols(); }
};

inline std::string format_g12(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline std::string write_embedding_csv(const EmbeddingFile& f) {
  std::string out = "id,label";
  for (std::size_t j = 0; j < f.dim(); ++j) out += ",f" + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < f.n(); ++i) {
    out += f.ids[i] + "," + std::to_string(f.labels[i]);
    for (double v : f.values.row(i)) out += "," + format_g12(v);
    out += "\n";
  }
  return out;
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

[[noreturn]] inline void parse_fail(std::size_t line, const std::string& msg) {
  throw Error(ErrorKind::ParseError, "line " + std::to_string(line) + ": " + msg);
}
}  // namespace detail

inline EmbeddingFile parse_embedding_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  EmbeddingFile f;
  std::size_t dim = 0;
  bool header = false;
  std::vector<double> flat;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (!header) {
      if (cells.size() < 3 || detail::trim(cells[0]) != "id" || detail::trim(cells[1]) != "label")
        detail::parse_fail(lineno, "header must be id,label,f0,...");
      dim = cells.size() - 2;
      for (std::size_t j = 0; j < dim; ++j)
        if (detail::trim(cells[j + 2]) != "f" + std::to_string(j))
          detail::parse_fail(lineno, "expected column f" + std::to_string(j));
      header = true;
      continue;
    }
    if (cells.size() != dim + 2)
      detail::parse_fail(lineno, "expected " + std::to_string(dim + 2) + " fields, found " + std::to_string(cells.size()));
    const std::string id = detail::trim(cells[0]);
    if (id.empty()) detail::parse_fail(lineno, "empty id");
    if (!seen.insert(id).second) detail::parse_fail(lineno, "duplicate id " + id);
    const std::string lab = detail::trim(cells[1]);
    int label = -1;
    auto [p, ec] = std::from_chars(lab.data(), lab.data() + lab.size(), label);
    if (ec != std::errc() || p != lab.data() + lab.size() || label < 0)
      detail::parse_fail(lineno, "label must be a nonnegative integer");
    for (std::size_t j = 0; j < dim; ++j) {
      const std::string cell = detail::trim(cells[j + 2]);
      double v = 0.0;
      auto [q, ec2] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec2 != std::errc() || q != cell.data() + cell.size() || !std::isfinite(v))
        detail::parse_fail(lineno, "bad number in column f" + std::to_string(j));
      flat.push_back(v);
    }
    f.ids.push_back(id);
    f.labels.push_back(label);
  }
  if (!header) detail::parse_fail(lineno == 0 ? 1 : lineno, "missing header");
  f.values = Matrix(f.ids.size(), dim);
  std::ranges::copy(flat, f.values.flat().begin());
  return f;
}

/// Flattens token fields into embedding rows with ids "s<index>".
inline EmbeddingFile to_embedding_file(const Dataset& d) {
  EmbeddingFile f;
  if (d.samples.empty()) return f;
  const std::size_t width = d.samples.front().size();
  f.values = Matrix(d.size(), width);
  for (std::size_t i = 0; i < d.size(); ++i) {
    f.ids.push_back("s" + std::to_string(i));
    f.labels.push_back(d.labels[i]);
    std::ranges::copy(d.samples[i].flat(), f.values.row(i).begin());
  }
  return f;
}

inline Dataset from_embedding_file(const EmbeddingFile& f, int patch_count, int patch_input_dim) {
  if (f.dim() != static_cast<std::size_t>(patch_count * patch_input_dim))
    throw Error(ErrorKind::DimMismatch, "token file width " + std::to_string(f.dim()) + " != patch_count x patch_input_dim");
  Dataset d;
  int max_label = -1;
  for (std::size_t i = 0; i < f.n(); ++i) {
    Matrix s(static_cast<std::size_t>(patch_count), static_cast<std::size_t>(patch_input_dim));
    std::ranges::copy(f.values.row(i), s.flat().begin());
    d.samples.push_back(std::move(s));
    d.labels.push_back(f.labels[i]);
    max_label = std::max(max_label, f.labels[i]);
  }
  d.classes = max_label + 1;
  return d;
}

}  // namespace mps::data
