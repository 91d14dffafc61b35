#pragma once

// Few-shot fine-tuning harness: prototype classification, logit blending,
// the combined CE + alignment + sculpting objective, consistency-loss
// baselines, schedules and held-out evaluation.

#include <mps/autodiff.hpp>
#include <mps/checkpoint.hpp>
#include <mps/data.hpp>
#include <mps/encoder.hpp>
#include <mps/hms.hpp>
#include <mps/metrics.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace mps::train {

enum class ConsistencyVariant { Mar, FeatCos, FeatL1, FeatL2, LogitKl, LogitL1, LogitL2, None };

inline constexpr ConsistencyVariant kAllVariants[] = {
    ConsistencyVariant::Mar,     ConsistencyVariant::FeatCos, ConsistencyVariant::FeatL1, ConsistencyVariant::FeatL2,
    ConsistencyVariant::LogitKl, ConsistencyVariant::LogitL1, ConsistencyVariant::LogitL2, ConsistencyVariant::None};

inline std::string to_string(ConsistencyVariant v) {
  switch (v) {
    case ConsistencyVariant::Mar: return "mar";
    case ConsistencyVariant::FeatCos: return "feat_cos";
    case ConsistencyVariant::FeatL1: return "feat_l1";
    case ConsistencyVariant::FeatL2: return "feat_l2";
    case ConsistencyVariant::LogitKl: return "logit_kl";
    case ConsistencyVariant::LogitL1: return "logit_l1";
    case ConsistencyVariant::LogitL2: return "logit_l2";
    case ConsistencyVariant::None: return "none";
  }
  return "unknown";
}

inline ConsistencyVariant parse_variant(const std::string& s) {
  for (auto v : kAllVariants)
    if (to_string(v) == s) return v;
  throw Error(ErrorKind::UnknownVariant, "unknown consistency variant: " + s);
}

enum class PrototypeMode { ClassMeans, Random };

struct TrainConfig {
  double lambda1 = 0.5;
  double lambda2 = 0.1;
  double alpha = 0.3;
  double tau = 0.01;
  bool tau_learnable = false;
  int k_shot = 16;
  int batch_size = 32;
  int epochs = 50;
  double peak_lr = 0.002;
  double warmup_start_lr = 1e-5;
  double momentum = 0.0;
  std::uint64_t seed = 1;
  hms::HmsConfig hms{};
  ConsistencyVariant consistency_variant = ConsistencyVariant::Mar;
  double ce_weight = 1.0;
  data::AugmentConfig augment{};
  PrototypeMode prototypes = PrototypeMode::ClassMeans;
  // Masking 70% of 4 tokens erases most class evidence, so training data uses 16.
  enc::EncoderConfig encoder{.patch_count = 16};

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw Error(ErrorKind::BadConfig, "lambda1, lambda2 must be >= 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorKind::BadConfig, "alpha must be in [0, 1]");
    if (!(tau > 0.0)) throw Error(ErrorKind::BadConfig, "tau must be > 0");
    if (k_shot < 1) throw Error(ErrorKind::BadConfig, "k_shot must be >= 1");
    if (batch_size < 2) throw Error(ErrorKind::BadConfig, "batch_size must be >= 2");
    if (epochs < 1) throw Error(ErrorKind::BadConfig, "epochs must be >= 1");
    if (!(peak_lr > 0.0) || !(warmup_start_lr > 0.0)) throw Error(ErrorKind::BadConfig, "learning rates must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorKind::BadConfig, "momentum must be in [0, 1)");
    encoder.validate();
    hms.validate(encoder.layers);
  }
};

// ------------------------------------------------------ classification ops

/// softmax over classes of <z, t_k> / tau.
inline std::vector<double> classify(std::span<const double> z, const FeatureMatrix& prototypes, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorKind::BadConfig, "tau must be > 0");
  std::vector<double> logits(prototypes.n_rows());
  for (std::size_t k = 0; k < logits.size(); ++k) logits[k] = dot(z, prototypes.row(k)) / tau;
  return metrics::softmax(logits);
}

/// argmax; ties go to the lowest index.
inline std::size_t predict(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k)
    if (scores[k] > scores[best]) best = k;
  return best;
}

struct LogitsPair {
  Matrix logits_ft;
  Matrix logits_zs;
};

inline Matrix blend_logits(const LogitsPair& pair, double alpha) {
  require_same_shape(pair.logits_ft, pair.logits_zs, "blend_logits");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorKind::BadConfig, "alpha must be in [0, 1]");
  Matrix out(pair.logits_ft.rows(), pair.logits_ft.cols());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.flat()[i] = alpha * pair.logits_ft.flat()[i] + (1.0 - alpha) * pair.logits_zs.flat()[i];
  return out;
}

inline double total_loss(double ce, double mar, double hms, const TrainConfig& cfg) {
  return ce + cfg.lambda1 * mar + cfg.lambda2 * hms;
}

/// Point-consistency penalties between frozen and tuned outputs. Feature
/// variants read features (rows unit-normalized by the caller), logit variants read logits.
inline double consistency_baseline(ConsistencyVariant variant, const Matrix& frozen, const Matrix& tuned) {
  require_same_shape(frozen, tuned, "consistency_baseline");
  const std::size_t n = frozen.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  switch (variant) {
    case ConsistencyVariant::FeatCos:
      for (std::size_t i = 0; i < n; ++i) total += 1.0 - dot(frozen.row(i), tuned.row(i));
      return total * inv_n;
    case ConsistencyVariant::FeatL1:
    case ConsistencyVariant::LogitL1:
      for (std::size_t i = 0; i < frozen.size(); ++i) total += std::abs(frozen.flat()[i] - tuned.flat()[i]);
      return total * inv_n;
    case ConsistencyVariant::FeatL2:
    case ConsistencyVariant::LogitL2:
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < frozen.cols(); ++j) s += (frozen(i, j) - tuned(i, j)) * (frozen(i, j) - tuned(i, j));
        total += std::sqrt(s);
      }
      return total * inv_n;
    case ConsistencyVariant::LogitKl:
      for (std::size_t i = 0; i < n; ++i) {
        const auto p = metrics::softmax(frozen.row(i));
        const auto q = metrics::softmax(tuned.row(i));
        for (std::size_t j = 0; j < p.size(); ++j)
          if (p[j] > 0.0) total += p[j] * std::log(p[j] / q[j]);
      }
      return total * inv_n;
    case ConsistencyVariant::Mar:
    case ConsistencyVariant::None:
      break;
  }
  throw Error(ErrorKind::UnknownVariant, "not a point-consistency variant: " + to_string(variant));
}

/// Linear warm-up across epoch 0, then cosine decay from the peak to 0.
inline double lr_schedule(long step, long steps_per_epoch, const TrainConfig& cfg) {
  if (steps_per_epoch < 1) throw Error(ErrorKind::BadConfig, "steps_per_epoch must be >= 1");
  if (step < steps_per_epoch)
    return cfg.warmup_start_lr +
           (cfg.peak_lr - cfg.warmup_start_lr) * static_cast<double>(step) / static_cast<double>(steps_per_epoch);
  const long decay_steps = static_cast<long>(cfg.epochs - 1) * steps_per_epoch;
  const double t = static_cast<double>(step - steps_per_epoch) / static_cast<double>(decay_steps);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

// ------------------------------------------------------------ loss graph

/// Frozen-model outputs for one batch of views.
struct FrozenOutputs {
  FeatureMatrix cls;                  // N x d, normalized
  std::vector<FeatureMatrix> tokens;  // per view, (M+1) x d normalized output tokens
  Matrix sims;                        // N x K cosine similarities to prototypes
};

inline FrozenOutputs run_frozen(const enc::EncoderParams& frozen, const enc::EncoderConfig& ecfg,
                                std::span<const Matrix> views, const FeatureMatrix& prototypes) {
  const auto traces = enc::encode(frozen, ecfg, views);
  Matrix cls(views.size(), static_cast<std::size_t>(ecfg.dim));
  FrozenOutputs out;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    std::ranges::copy(traces[i].output().row(0), cls.row(i).begin());
    out.tokens.emplace_back(traces[i].output());
  }
  out.cls = FeatureMatrix(std::move(cls));
  out.sims = matmul_nt(out.cls.matrix(), prototypes.matrix());
  return out;
}

struct LossTerms {
  ad::Var ce, mar, consistency, hms, total;
  ad::Var logits_ft, logits_blend;
};

/// Records the full objective for one batch of views on the tape.
/// `log_scale` holds log(1/tau) as a 1 x 1 variable.
inline LossTerms build_loss(ad::Tape& t, const enc::BoundParams& tuned, ad::Var log_scale, std::span<const Matrix> views,
                            std::span<const int> labels, const FrozenOutputs& frozen, const FeatureMatrix& prototypes,
                            double tau_prime, const TrainConfig& cfg) {
  const auto& ecfg = cfg.encoder;
  const std::size_t n = views.size();
  const int L = ecfg.layers;

  std::vector<std::vector<ad::Var>> layers;
  layers.reserve(n);
  std::vector<ad::Var> cls_rows;
  for (const auto& v : views) {
    layers.push_back(enc::forward_sample(t, tuned, ecfg, v));
    cls_rows.push_back(ad::row(t, layers.back().back(), 0));
  }
  ad::Var z = ad::normalize_rows(t, ad::concat_rows(t, cls_rows));
  ad::Var protos = t.constant(prototypes.matrix());
  ad::Var scale = ad::exp_scalar(t, log_scale);

  LossTerms out;
  out.logits_ft = ad::scale_by(t, ad::matmul_nt(t, z, protos), scale);
  ad::Var logits_zs = ad::scale_by(t, t.constant(frozen.sims), scale);
  out.logits_blend = ad::add(t, ad::scale(t, out.logits_ft, cfg.alpha), ad::scale(t, logits_zs, 1.0 - cfg.alpha));
  out.ce = ad::cross_entropy(t, out.logits_blend, labels);

  // MAR, global + local.
  const double nn = static_cast<double>(n);
  ad::Var mar_global = ad::sum_abs(t, ad::sub(t, ad::matmul_nt(t, z, z), t.constant(gram(frozen.cls).matrix())),
                                   1.0 / (nn * nn));
  std::vector<ad::Var> local_terms;
  std::vector<double> local_w;
  for (std::size_t i = 0; i < n; ++i) {
    ad::Var tok = ad::normalize_rows(t, layers[i].back());
    const double m1 = static_cast<double>(frozen.tokens[i].n_rows());
    local_terms.push_back(
        ad::sum_abs(t, ad::sub(t, ad::matmul_nt(t, tok, tok), t.constant(gram(frozen.tokens[i]).matrix())), 1.0));
    local_w.push_back(1.0 / (nn * m1 * m1));
  }
  ad::Var mar_local = ad::weighted_sum(t, local_terms, local_w);
  {
    ad::Var parts[] = {mar_global, mar_local};
    const double ones[] = {1.0, 1.0};
    out.mar = ad::weighted_sum(t, parts, ones);
  }

  switch (cfg.consistency_variant) {
    case ConsistencyVariant::Mar: out.consistency = out.mar; break;
    case ConsistencyVariant::None: out.consistency = t.constant(Matrix(1, 1, 0.0)); break;
    case ConsistencyVariant::FeatCos: {
      ad::Var dotsum = ad::sum_product(t, z, frozen.cls.matrix(), -1.0 / nn);
      ad::Var parts[] = {dotsum, t.constant(Matrix(1, 1, 1.0))};
      const double ones[] = {1.0, 1.0};
      out.consistency = ad::weighted_sum(t, parts, ones);
      break;
    }
    case ConsistencyVariant::FeatL1:
      out.consistency = ad::sum_abs(t, ad::sub(t, z, t.constant(frozen.cls.matrix())), 1.0 / nn);
      break;
    case ConsistencyVariant::FeatL2:
      out.consistency = ad::mean_row_norm(t, ad::sub(t, z, t.constant(frozen.cls.matrix())));
      break;
    case ConsistencyVariant::LogitKl: {
      Matrix zs_probs(frozen.sims.rows(), frozen.sims.cols());
      const Matrix& zs = t.value(logits_zs);
      for (std::size_t i = 0; i < zs.rows(); ++i) std::ranges::copy(metrics::softmax(zs.row(i)), zs_probs.row(i).begin());
      out.consistency = ad::kl_rows(t, out.logits_ft, zs_probs);
      break;
    }
    case ConsistencyVariant::LogitL1:
      out.consistency = ad::sum_abs(t, ad::sub(t, out.logits_ft, logits_zs), 1.0 / nn);
      break;
    case ConsistencyVariant::LogitL2:
      out.consistency = ad::mean_row_norm(t, ad::sub(t, out.logits_ft, logits_zs));
      break;
  }

  // HMS over the sculpted layers, earliest first.
  std::vector<int> proto_labels(prototypes.n_rows());
  for (std::size_t k = 0; k < proto_labels.size(); ++k) proto_labels[k] = static_cast<int>(k);
  std::vector<std::size_t> self(n);
  std::vector<std::vector<std::size_t>> positives(n);
  for (std::size_t q = 0; q < n; ++q) {
    self[q] = q;
    for (std::size_t s = 0; s < n; ++s)
      if (s != q && labels[s] == labels[q]) positives[q].push_back(s);
    positives[q].push_back(n + static_cast<std::size_t>(labels[q]));
  }
  const auto layer_set = cfg.hms.layer_set(L);
  const auto weights = hms::layer_decay_weights(L, cfg.hms.depth);
  std::vector<ad::Var> hms_terms;
  for (int l : layer_set) {
    ad::Var q = z;
    if (l != L) {
      std::vector<ad::Var> proj;
      for (std::size_t i = 0; i < n; ++i)
        proj.push_back(enc::pseudo_forward(t, tuned, ad::row(t, layers[i][static_cast<std::size_t>(l)], 0), l));
      q = ad::normalize_rows(t, ad::concat_rows(t, proj));
    }
    ad::Var sup_parts[] = {q, protos};
    ad::Var supports = ad::concat_rows(t, sup_parts);
    ad::Var logits = ad::scale(t, ad::matmul_nt(t, q, supports), 1.0 / tau_prime);
    hms_terms.push_back(ad::masked_contrastive(t, logits, self, positives));
  }
  out.hms = ad::weighted_sum(t, hms_terms, weights);

  ad::Var terms[] = {out.ce, out.consistency, out.hms};
  const double w[] = {cfg.ce_weight, cfg.lambda1, cfg.lambda2};
  out.total = ad::weighted_sum(t, terms, w);
  return out;
}

// --------------------------------------------------------------- trainer

struct StepRecord {
  double ce = 0, mar = 0, consistency = 0, hms = 0, total = 0, lr = 0, tau_prime = 0;
};

struct EvalResult {
  double accuracy = 0.0;
  metrics::MetricReport report;
  std::vector<std::size_t> predictions;
};

struct EpochReport {
  int epoch = 0;
  StepRecord mean;  // averaged over the epoch's steps; lr/tau_prime are the last values used
  EvalResult eval;

  std::string serialize() const {
    std::string s = "epoch=" + std::to_string(epoch) + "\n";
    auto kv = [&](const char* k, double v) { s += std::string(k) + "=" + metrics::format_value(v) + "\n"; };
    kv("lr", mean.lr);
    kv("tau_prime", mean.tau_prime);
    kv("loss_total", mean.total);
    kv("loss_ce", mean.ce);
    kv("loss_mar", mean.mar);
    kv("loss_consistency", mean.consistency);
    kv("loss_hms", mean.hms);
    kv("accuracy", eval.accuracy);
    s += eval.report.serialize();
    return s;
  }
};

struct InitCheck {
  double mar_step0 = -1.0;
  bool parallels_zero = false;
  bool probe_predictions_equal = false;
  std::size_t probe_size = 0;
};

struct TrainResult {
  enc::EncoderParams params;
  double log_scale = 0.0;
  std::vector<EpochReport> history;
  InitCheck init;
  std::uint64_t param_hash = 0;

  const EvalResult& final_eval() const { return history.back().eval; }
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

class Trainer {
 public:
  Trainer(TrainConfig cfg, data::Dataset train, data::Dataset test)
      : cfg_(std::move(cfg)), train_(std::move(train)), test_(std::move(test)) {
    cfg_.validate();
    if (train_.size() == 0 || test_.size() == 0) throw Error(ErrorKind::InsufficientSamples, "empty train or test set");
    frozen_ = enc::init_params(cfg_.encoder, mix_seed(cfg_.seed, 1));
    tuned_ = frozen_;
    mask_ = enc::apply_grouping(tuned_, cfg_.encoder);
    velocity_.resize(mask_.tensors.size());
    fill_ = data::token_mean(train_);
    log_scale_ = std::log(1.0 / cfg_.tau);
    prototypes_ = make_prototypes();
    test_frozen_ = run_frozen(frozen_, cfg_.encoder, test_.samples, prototypes_);
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  const enc::EncoderParams& frozen() const noexcept { return frozen_; }
  const enc::EncoderParams& tuned() const noexcept { return tuned_; }
  const enc::TrainableMask& mask() const noexcept { return mask_; }
  const FeatureMatrix& prototypes() const noexcept { return prototypes_; }
  double log_scale() const noexcept { return log_scale_; }

  long steps_per_epoch() const {
    const auto n = static_cast<long>(train_.size());
    return (n + cfg_.batch_size - 1) / cfg_.batch_size;
  }

  /// Stratified epoch order: classes interleaved round-robin so consecutive
  /// batches mix classes.
  std::vector<std::vector<std::size_t>> epoch_batches(int epoch) const {
    std::mt19937_64 rng(mix_seed(cfg_.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(train_.classes));
    for (std::size_t i = 0; i < train_.size(); ++i) by_class[static_cast<std::size_t>(train_.labels[i])].push_back(i);
    for (auto& c : by_class) std::ranges::shuffle(c, rng);
    std::vector<std::size_t> class_order(by_class.size());
    for (std::size_t c = 0; c < class_order.size(); ++c) class_order[c] = c;
    std::ranges::shuffle(class_order, rng);
    std::vector<std::size_t> order;
    for (std::size_t r = 0; order.size() < train_.size(); ++r)
      for (std::size_t c : class_order)
        if (r < by_class[c].size()) order.push_back(by_class[c][r]);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg_.batch_size)) {
      const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(cfg_.batch_size));
      batches.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(end));
    }
    return batches;
  }

  /// Two augmented views per image, views of image i at 2i and 2i+1.
  void make_views(std::span<const std::size_t> batch, int epoch, std::vector<Matrix>& views,
                  std::vector<int>& labels) const {
    views.clear();
    labels.clear();
    for (std::size_t idx : batch) {
      const auto seed = mix_seed(mix_seed(cfg_.seed, 7 + static_cast<std::uint64_t>(epoch)), idx);
      auto [a, b] = data::augment(train_.samples[idx], fill_, cfg_.augment, seed);
      views.push_back(std::move(a));
      views.push_back(std::move(b));
      labels.push_back(train_.labels[idx]);
      labels.push_back(train_.labels[idx]);
    }
  }

  /// One SGD step; returns the loss components before the update.
  StepRecord step(std::span<const Matrix> views, std::span<const int> labels, double lr, double tau_prime) {
    const FrozenOutputs frozen = run_frozen(frozen_, cfg_.encoder, views, prototypes_);
    ad::Tape t;
    const enc::BoundParams bound = enc::bind(t, tuned_, cfg_.encoder, &mask_);
    ad::Var log_scale = t.parameter(Matrix(1, 1, log_scale_), cfg_.tau_learnable);
    const LossTerms terms = build_loss(t, bound, log_scale, views, labels, frozen, prototypes_, tau_prime, cfg_);
    t.backward(terms.total);

    const auto grads = enc::gradients(t, bound);
    auto ptrs = enc::tensor_pointers(tuned_);
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      if (!mask_.tensors[i]) continue;
      apply_update(*ptrs[i], grads[i], velocity_[i], lr);
    }
    if (cfg_.tau_learnable) {
      Matrix p(1, 1, log_scale_);
      apply_update(p, t.grad(log_scale), scale_velocity_, lr);
      log_scale_ = p(0, 0);
    }
    return {t.scalar(terms.ce), t.scalar(terms.mar), t.scalar(terms.consistency), t.scalar(terms.hms),
            t.scalar(terms.total), lr, tau_prime};
  }

  /// Held-out accuracy on blended logits plus the geometry metric report.
  EvalResult evaluate() const {
    const FrozenOutputs tuned = run_frozen(tuned_, cfg_.encoder, test_.samples, prototypes_);
    const double s = std::exp(log_scale_);
    LogitsPair pair{tuned.sims, test_frozen_.sims};
    for (double& v : pair.logits_ft.flat()) v *= s;
    for (double& v : pair.logits_zs.flat()) v *= s;
    const Matrix blended = blend_logits(pair, cfg_.alpha);

    EvalResult r;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < blended.rows(); ++i) {
      r.predictions.push_back(predict(blended.row(i)));
      if (static_cast<int>(r.predictions.back()) == test_.labels[i]) ++correct;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(blended.rows());

    auto& rep = r.report;
    rep.rsa = metrics::try_metric([&] { return metrics::rsa(gram(test_frozen_.cls), gram(tuned.cls)); });
    rep.calinski_harabasz = metrics::try_metric([&] { return metrics::calinski_harabasz(tuned.cls, test_.labels); });
    rep.silhouette = metrics::try_metric([&] { return metrics::silhouette(tuned.cls, test_.labels); });
    rep.hellinger_mean = metrics::try_metric([&] { return metrics::hellinger_mean(pair.logits_zs, pair.logits_ft); });
    rep.spearman_logits_mean =
        metrics::try_metric([&] { return metrics::spearman_rows_mean(pair.logits_zs, pair.logits_ft); });
    rep.cosine_shift_mean = metrics::try_metric([&] { return metrics::cosine_shift(test_frozen_.cls, tuned.cls); });
    return r;
  }

  /// Predictions of the frozen model alone (zero-shot logits) on the test set.
  std::vector<std::size_t> frozen_predictions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < test_frozen_.sims.rows(); ++i) out.push_back(predict(test_frozen_.sims.row(i)));
    return out;
  }

  InitCheck check_initialization(std::size_t probe = 64) {
    InitCheck c;
    bool zero = true;
    for (const auto& blk : tuned_.blocks)
      if (blk.has_parallel)
        for (const Matrix* m : {&blk.parallel_w, &blk.parallel_b})
          zero = zero && std::ranges::all_of(m->flat(), [](double v) { return v == 0.0; });
    c.parallels_zero = zero;

    const auto batches = epoch_batches(0);
    std::vector<Matrix> views;
    std::vector<int> labels;
    make_views(batches.front(), 0, views, labels);
    const FrozenOutputs frozen = run_frozen(frozen_, cfg_.encoder, views, prototypes_);
    ad::Tape t;
    const enc::BoundParams bound = enc::bind(t, tuned_, cfg_.encoder, &mask_);
    ad::Var log_scale = t.parameter(Matrix(1, 1, log_scale_), cfg_.tau_learnable);
    const LossTerms terms = build_loss(t, bound, log_scale, views, labels, frozen, prototypes_,
                                       hms::tau_schedule(0, cfg_.epochs, cfg_.hms), cfg_);
    c.mar_step0 = t.scalar(terms.mar);

    const EvalResult ev = evaluate();
    const auto zs = frozen_predictions();
    c.probe_size = std::min(probe, zs.size());
    c.probe_predictions_equal = std::equal(zs.begin(), zs.begin() + static_cast<long>(c.probe_size), ev.predictions.begin());
    return c;
  }

  TrainResult run() {
    TrainResult res;
    res.init = check_initialization();
    const long spe = steps_per_epoch();
    long global_step = 0;
    std::vector<Matrix> views;
    std::vector<int> labels;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const double tau_prime = hms::tau_schedule(epoch, cfg_.epochs, cfg_.hms);
      EpochReport rep;
      rep.epoch = epoch;
      const auto batches = epoch_batches(epoch);
      for (const auto& b : batches) {
        make_views(b, epoch, views, labels);
        const StepRecord s = step(views, labels, lr_schedule(global_step, spe, cfg_), tau_prime);
        rep.mean.ce += s.ce;
        rep.mean.mar += s.mar;
        rep.mean.consistency += s.consistency;
        rep.mean.hms += s.hms;
        rep.mean.total += s.total;
        rep.mean.lr = s.lr;
        rep.mean.tau_prime = s.tau_prime;
        ++global_step;
      }
      const double nb = static_cast<double>(batches.size());
      for (double* v : {&rep.mean.ce, &rep.mean.mar, &rep.mean.consistency, &rep.mean.hms, &rep.mean.total}) *v /= nb;
      rep.eval = evaluate();
      res.history.push_back(std::move(rep));
    }
    res.params = tuned_;
    res.log_scale = log_scale_;
    res.param_hash = enc::params_hash(tuned_, cfg_.encoder);
    return res;
  }

 private:
  FeatureMatrix make_prototypes() const {
    const std::size_t k = static_cast<std::size_t>(train_.classes);
    const auto d = static_cast<std::size_t>(cfg_.encoder.dim);
    Matrix protos(k, d);
    if (cfg_.prototypes == PrototypeMode::Random) {
      std::mt19937_64 rng(mix_seed(cfg_.seed, 2));
      std::normal_distribution<double> n01(0.0, 1.0);
      for (double& v : protos.flat()) v = n01(rng);
      return FeatureMatrix(std::move(protos));
    }
    const FeatureMatrix z(enc::encode_cls(frozen_, cfg_.encoder, train_.samples));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < train_.size(); ++i) {
      const auto c = static_cast<std::size_t>(train_.labels[i]);
      ++counts[c];
      for (std::size_t j = 0; j < d; ++j) protos(c, j) += z.row(i)[j];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] == 0) throw Error(ErrorKind::InsufficientSamples, "class " + std::to_string(c) + " has no training sample");
    return FeatureMatrix(std::move(protos));
  }

  void apply_update(Matrix& p, const Matrix& g, Matrix& velocity, double lr) const {
    if (cfg_.momentum > 0.0) {
      if (velocity.empty()) velocity = Matrix(p.rows(), p.cols());
      for (std::size_t i = 0; i < p.size(); ++i) {
        velocity.flat()[i] = cfg_.momentum * velocity.flat()[i] + g.flat()[i];
        p.flat()[i] -= lr * velocity.flat()[i];
      }
    } else {
      for (std::size_t i = 0; i < p.size(); ++i) p.flat()[i] -= lr * g.flat()[i];
    }
  }

  TrainConfig cfg_;
  data::Dataset train_, test_;
  enc::EncoderParams frozen_, tuned_;
  enc::TrainableMask mask_;
  std::vector<Matrix> velocity_;
  Matrix scale_velocity_;
  Matrix fill_;
  double log_scale_ = 0.0;
  FeatureMatrix prototypes_;
  FrozenOutputs test_frozen_;
};

/// K-shot split of a pooled dataset followed by a full training run.
struct Experiment {
  data::Dataset train;
  data::Dataset test;
};

inline Experiment split_pool(const data::Dataset& pool, int k, std::uint64_t seed) {
  const auto split = data::sample_k_shot(pool.labels, k, seed);
  return {pool.subset(split.train), pool.subset(split.test)};
}

inline TrainResult train(const TrainConfig& cfg, const data::Dataset& train, const data::Dataset& test) {
  Trainer t(cfg, train, test);
  return t.run();
}

}  // namespace mps::train
