#pragma once

// Hierarchical manifold sculpting: query/support contrastive loss with
// label-defined positives, layer decay weights and the temperature schedule.

#include <mps/linalg.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <numbers>
#include <span>
#include <vector>

namespace mps::hms {

struct QuerySupport {
  FeatureMatrix queries;                 // N_q x d
  FeatureMatrix supports;                // (N_q + K) x d, queries first then prototypes
  std::vector<int> query_labels;
  std::vector<int> support_labels;
  std::vector<std::size_t> support_is_self;  // support index of each query's own copy

  std::size_t n_queries() const noexcept { return query_labels.size(); }

  /// Supports sharing the query's label, excluding its own copy.
  std::vector<std::size_t> positives(std::size_t q) const {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < support_labels.size(); ++s)
      if (s != support_is_self[q] && support_labels[s] == query_labels[q]) out.push_back(s);
    return out;
  }
};

struct HmsConfig {
  int depth = 2;  // number of final layers sculpted, output layer included
  double tau_start = 0.5;
  double tau_end = 0.07;

  void validate(int layer_count) const {
    if (depth < 1 || depth > layer_count)
      throw Error(ErrorKind::BadDepth, "hms depth must be in [1, " + std::to_string(layer_count) + "]");
    if (!(tau_start > 0.0) || !(tau_end > 0.0)) throw Error(ErrorKind::BadConfig, "hms temperatures must be > 0");
  }

  /// 1-based block indices sculpted, ascending; the last one is the output layer.
  std::vector<int> layer_set(int layer_count) const {
    validate(layer_count);
    std::vector<int> out;
    for (int l = layer_count - depth + 1; l <= layer_count; ++l) out.push_back(l);
    return out;
  }
};

inline QuerySupport build_query_support(const FeatureMatrix& image_feats, std::span<const int> image_labels,
                                        const FeatureMatrix& prototypes, std::span<const int> prototype_labels) {
  if (image_feats.n_rows() != image_labels.size() || prototypes.n_rows() != prototype_labels.size())
    throw Error(ErrorKind::ShapeMismatch, "labels do not match feature rows");
  if (image_feats.dim() != prototypes.dim())
    throw Error(ErrorKind::ShapeMismatch, "image and prototype dimensions differ");

  const Matrix parts[] = {image_feats.matrix(), prototypes.matrix()};
  QuerySupport qs{image_feats, FeatureMatrix(concat_rows(parts)),
                  {image_labels.begin(), image_labels.end()}, {}, {}};
  qs.support_labels.assign(image_labels.begin(), image_labels.end());
  qs.support_labels.insert(qs.support_labels.end(), prototype_labels.begin(), prototype_labels.end());
  qs.support_is_self.resize(image_feats.n_rows());
  for (std::size_t q = 0; q < image_feats.n_rows(); ++q) qs.support_is_self[q] = q;

  for (std::size_t q = 0; q < qs.n_queries(); ++q)
    if (qs.positives(q).empty())
      throw Error(ErrorKind::EmptyPositives, "query " + std::to_string(q) + " has no positive support");
  return qs;
}

/// -(1/|P|) Sum_{s in P} log softmax over S\q of <q,s>/tau at s.
inline double sculpt_query_loss(std::span<const double> q, const QuerySupport& qs, std::size_t q_index,
                                double tau_prime) {
  if (!(tau_prime > 0.0)) throw Error(ErrorKind::BadConfig, "tau' must be > 0");
  const std::size_t self = qs.support_is_self[q_index];
  const std::size_t ns = qs.supports.n_rows();
  std::vector<double> logits(ns);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < ns; ++s) {
    if (s == self) continue;
    logits[s] = dot(q, qs.supports.row(s)) / tau_prime;
    mx = std::max(mx, logits[s]);
  }
  double z = 0.0;
  for (std::size_t s = 0; s < ns; ++s)
    if (s != self) z += std::exp(logits[s] - mx);
  const double lse = mx + std::log(z);

  const auto pos = qs.positives(q_index);
  if (pos.empty()) throw Error(ErrorKind::EmptyPositives, "query has no positive support");
  double total = 0.0;
  for (std::size_t s : pos) total += lse - logits[s];
  return total / static_cast<double>(pos.size());
}

inline double sculpt_loss(const QuerySupport& qs, double tau_prime) {
  double total = 0.0;
  for (std::size_t q = 0; q < qs.n_queries(); ++q) total += sculpt_query_loss(qs.queries.row(q), qs, q, tau_prime);
  return total / static_cast<double>(qs.n_queries());
}

/// Weights of the last `depth` layers, earliest first: the final layer gets 1
/// and every preceding one half of its successor.
inline std::vector<double> layer_decay_weights(int layer_count, int depth) {
  if (depth < 1 || depth > layer_count)
    throw Error(ErrorKind::BadDepth, "depth " + std::to_string(depth) + " not in [1, " +
                                         std::to_string(layer_count) + "]");
  std::vector<double> w(static_cast<std::size_t>(depth));
  double v = 1.0;
  for (int i = depth - 1; i >= 0; --i, v *= 0.5) w[static_cast<std::size_t>(i)] = v;
  return w;
}

/// Cosine annealing from tau_start at epoch 0 to tau_end at the final epoch.
inline double tau_schedule(int epoch, int total_epochs, const HmsConfig& cfg) {
  if (total_epochs <= 1) return cfg.tau_start;
  const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return cfg.tau_end + (cfg.tau_start - cfg.tau_end) * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

/// Sum_l w_l * sculpt_loss(qs_l); `per_layer` ordered earliest layer first, output layer last.
inline double hms_total(std::span<const QuerySupport> per_layer, const HmsConfig& cfg, int layer_count,
                        double tau_prime) {
  const auto w = layer_decay_weights(layer_count, cfg.depth);
  if (per_layer.size() != w.size())
    throw Error(ErrorKind::ShapeMismatch, "need one query/support set per sculpted layer");
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += w[i] * sculpt_loss(per_layer[i], tau_prime);
  return total;
}

}  // namespace mps::hms
