#pragma once

// Drift audit of two embedding files holding the same samples before and
// after fine-tuning.

#include <mps/data.hpp>
#include <mps/gw.hpp>
#include <mps/metrics.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace mps::audit {

struct AuditOptions {
  std::uint64_t seed = 7;
  double tau = 0.01;  // temperature for prototype logits
  std::size_t gw_subsample = gw::kDefaultMaxExactN;
};

struct AuditReport {
  std::size_t n = 0, d = 0;
  metrics::Metric gram_bound_p1;
  metrics::Metric gw_upper_estimate;        // full set, only when n is small enough
  metrics::Metric gw_subsample_estimate;    // seeded subsample otherwise
  metrics::Metric gw_subsample_gram_bound;
  std::vector<std::string> gw_subsample_ids;
  std::string gw_coupling;
  metrics::Metric rsa;
  metrics::Metric cosine_shift_mean;
  metrics::Metric calinski_harabasz_before, calinski_harabasz_after;
  metrics::Metric silhouette_before, silhouette_after;
  metrics::Metric hellinger_mean = metrics::Metric::skipped("no_prototypes");
  metrics::Metric spearman_logits_mean = metrics::Metric::skipped("no_prototypes");

  std::string serialize() const {
    std::string s = "n=" + std::to_string(n) + "\nd=" + std::to_string(d) + "\n";
    auto put = [&](const char* k, const metrics::Metric& m) { s += std::string(k) + "=" + metrics::format_metric(m) + "\n"; };
    put("gram_bound_p1", gram_bound_p1);
    put("gw_upper_estimate", gw_upper_estimate);
    s += "gw_coupling=" + (gw_coupling.empty() ? std::string("skipped:not_computed") : gw_coupling) + "\n";
    put("gw_subsample_estimate", gw_subsample_estimate);
    put("gw_subsample_gram_bound", gw_subsample_gram_bound);
    s += "gw_subsample_ids=";
    if (gw_subsample_ids.empty()) s += "skipped:not_subsampled";
    for (std::size_t i = 0; i < gw_subsample_ids.size(); ++i) s += (i ? ";" : "") + gw_subsample_ids[i];
    s += "\n";
    put("rsa", rsa);
    put("cosine_shift_mean", cosine_shift_mean);
    put("calinski_harabasz_before", calinski_harabasz_before);
    put("calinski_harabasz_after", calinski_harabasz_after);
    put("silhouette_before", silhouette_before);
    put("silhouette_after", silhouette_after);
    put("hellinger_mean", hellinger_mean);
    put("spearman_logits_mean", spearman_logits_mean);
    return s;
  }
};

/// Reorders `after` to the row order of `before`; the id sets must coincide.
inline data::EmbeddingFile align_ids(const data::EmbeddingFile& before, const data::EmbeddingFile& after) {
  std::map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < after.n(); ++i) where[after.ids[i]] = i;
  for (const auto& id : before.ids)
    if (!where.contains(id)) throw Error(ErrorKind::IdMismatch, "id " + id + " missing from the second file");
  if (after.n() != before.n()) {
    std::map<std::string, bool> in_before;
    for (const auto& id : before.ids) in_before[id] = true;
    for (const auto& id : after.ids)
      if (!in_before.contains(id)) throw Error(ErrorKind::IdMismatch, "id " + id + " missing from the first file");
  }
  if (after.dim() != before.dim())
    throw Error(ErrorKind::DimMismatch, "feature widths differ: " + std::to_string(before.dim()) + " vs " +
                                            std::to_string(after.dim()));
  data::EmbeddingFile out;
  out.values = Matrix(before.n(), after.dim());
  for (std::size_t i = 0; i < before.n(); ++i) {
    const std::size_t j = where.at(before.ids[i]);
    out.ids.push_back(after.ids[j]);
    out.labels.push_back(after.labels[j]);
    std::ranges::copy(after.values.row(j), out.values.row(i).begin());
  }
  return out;
}

/// First `k` indices of a seeded shuffle, sorted.
inline std::vector<std::size_t> subsample(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::ranges::shuffle(idx, rng);
  idx.resize(std::min(n, k));
  std::ranges::sort(idx);
  return idx;
}

inline Matrix prototype_logits(const FeatureMatrix& z, const FeatureMatrix& protos, double tau) {
  Matrix l = matmul_nt(z.matrix(), protos.matrix());
  for (double& v : l.flat()) v /= tau;
  return l;
}

inline AuditReport run_audit(const data::EmbeddingFile& before, const data::EmbeddingFile& after_raw,
                             const data::EmbeddingFile* prototypes, const AuditOptions& opt) {
  const data::EmbeddingFile after = align_ids(before, after_raw);
  AuditReport r;
  r.n = before.n();
  r.d = before.dim();
  const FeatureMatrix zb(before.values), za(after.values);
  const GramMatrix gb = gram(zb), ga = gram(za);
  r.gram_bound_p1 = metrics::Metric::of(gw::gram_bound(gb, ga, 1));

  if (r.n <= opt.gw_subsample) {
    const auto est = gw::gw_estimate(gw::MetricSpace::from_features(zb), gw::MetricSpace::from_features(za), 1);
    r.gw_upper_estimate = metrics::Metric::of(est.value);
    r.gw_coupling = gw::to_string(est.kind);
    r.gw_subsample_estimate = metrics::Metric::skipped("not_subsampled");
    r.gw_subsample_gram_bound = metrics::Metric::skipped("not_subsampled");
  } else {
    r.gw_upper_estimate = metrics::Metric::skipped("TooLarge");
    const auto idx = subsample(r.n, opt.gw_subsample, opt.seed);
    for (std::size_t i : idx) r.gw_subsample_ids.push_back(before.ids[i]);
    const FeatureMatrix sb(select_rows(zb.matrix(), idx)), sa(select_rows(za.matrix(), idx));
    const auto est = gw::gw_estimate(gw::MetricSpace::from_features(sb), gw::MetricSpace::from_features(sa), 1);
    r.gw_subsample_estimate = metrics::Metric::of(est.value);
    r.gw_coupling = gw::to_string(est.kind);
    r.gw_subsample_gram_bound = metrics::Metric::of(gw::gram_bound(gram(sb), gram(sa), 1));
  }

  r.rsa = metrics::try_metric([&] { return metrics::rsa(gb, ga); });
  r.cosine_shift_mean = metrics::try_metric([&] { return metrics::cosine_shift(zb, za); });
  r.calinski_harabasz_before = metrics::try_metric([&] { return metrics::calinski_harabasz(zb, before.labels); });
  r.calinski_harabasz_after = metrics::try_metric([&] { return metrics::calinski_harabasz(za, after.labels); });
  r.silhouette_before = metrics::try_metric([&] { return metrics::silhouette(zb, before.labels); });
  r.silhouette_after = metrics::try_metric([&] { return metrics::silhouette(za, after.labels); });

  if (prototypes != nullptr) {
    if (prototypes->dim() != r.d)
      throw Error(ErrorKind::DimMismatch, "prototype width " + std::to_string(prototypes->dim()) + " != " +
                                              std::to_string(r.d));
    const FeatureMatrix p(prototypes->values);
    const Matrix lb = prototype_logits(zb, p, opt.tau), la = prototype_logits(za, p, opt.tau);
    r.hellinger_mean = metrics::try_metric([&] { return metrics::hellinger_mean(lb, la); });
    r.spearman_logits_mean = metrics::try_metric([&] { return metrics::spearman_rows_mean(lb, la); });
  }
  return r;
}

}  // namespace mps::audit
