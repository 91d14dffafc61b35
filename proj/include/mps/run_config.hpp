#pragma once

// Training run configuration as read by `mps train`: every TrainConfig field
// under its snake_case name, plus where the data comes from.

#include <mps/config.hpp>
#include <mps/trainer.hpp>

#include <set>
#include <string>

namespace mps::run {

struct RunConfig {
  train::TrainConfig train;
  std::string data_dir;  // empty: synthesize in memory
  data::SynthConfig synth;
};

inline const std::vector<std::string>& required_keys() {
  static const std::vector<std::string> keys{
      "lambda1",   "lambda2",  "alpha",         "tau",           "tau_learnable", "k_shot",   "batch_size",
      "epochs",    "peak_lr",  "warmup_start_lr", "seed",        "hms_depth",     "hms_tau_start", "hms_tau_end",
      "consistency_variant"};
  return keys;
}

inline const std::vector<std::string>& optional_keys() {
  static const std::vector<std::string> keys{
      "momentum",      "ce_weight",        "prototypes",     "augment_sigma", "augment_keep_min", "augment_keep_max",
      "dim",           "heads",            "layers",         "patch_count",   "patch_input_dim",  "ffn_dim",
      "group_b0",      "group_b1",         "data_dir",       "synth_classes", "synth_per_class",  "synth_noise",
      "synth_class_scale", "synth_position_spread", "synth_seed"};
  return keys;
}

inline int to_int(long long v, const std::string& key) {
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    throw Error(ErrorKind::BadConfig, "key " + key + ": out of range");
  return static_cast<int>(v);
}

inline RunConfig parse_run_config(const config::KeyValues& kv) {
  std::set<std::string> known(required_keys().begin(), required_keys().end());
  known.insert(optional_keys().begin(), optional_keys().end());
  for (const auto& [k, v] : kv.entries())
    if (!known.contains(k)) throw Error(ErrorKind::BadConfig, "unknown key: " + k);
  for (const auto& k : required_keys()) kv.raw(k);

  RunConfig rc;
  auto& c = rc.train;
  c.lambda1 = kv.number("lambda1");
  c.lambda2 = kv.number("lambda2");
  c.alpha = kv.number("alpha");
  c.tau = kv.number("tau");
  c.tau_learnable = kv.boolean("tau_learnable");
  c.k_shot = to_int(kv.integer("k_shot"), "k_shot");
  c.batch_size = to_int(kv.integer("batch_size"), "batch_size");
  c.epochs = to_int(kv.integer("epochs"), "epochs");
  c.peak_lr = kv.number("peak_lr");
  c.warmup_start_lr = kv.number("warmup_start_lr");
  const long long seed = kv.integer("seed");
  if (seed < 0) throw Error(ErrorKind::BadConfig, "key seed: must be >= 0");
  c.seed = static_cast<std::uint64_t>(seed);
  c.hms.depth = to_int(kv.integer("hms_depth"), "hms_depth");
  c.hms.tau_start = kv.number("hms_tau_start");
  c.hms.tau_end = kv.number("hms_tau_end");
  c.consistency_variant = train::parse_variant(kv.raw("consistency_variant"));

  c.momentum = kv.get_or("momentum", c.momentum);
  c.ce_weight = kv.get_or("ce_weight", c.ce_weight);
  const std::string protos = kv.get_or<std::string>("prototypes", "class_means");
  if (protos == "class_means") c.prototypes = train::PrototypeMode::ClassMeans;
  else if (protos == "random") c.prototypes = train::PrototypeMode::Random;
  else throw Error(ErrorKind::BadConfig, "key prototypes: expected class_means or random, got " + protos);
  c.augment.sigma = kv.get_or("augment_sigma", c.augment.sigma);
  c.augment.keep_min = kv.get_or("augment_keep_min", c.augment.keep_min);
  c.augment.keep_max = kv.get_or("augment_keep_max", c.augment.keep_max);
  auto& e = c.encoder;
  e.dim = kv.get_or("dim", e.dim);
  e.heads = kv.get_or("heads", e.heads);
  e.layers = kv.get_or("layers", e.layers);
  e.patch_count = kv.get_or("patch_count", e.patch_count);
  e.patch_input_dim = kv.get_or("patch_input_dim", e.patch_input_dim);
  e.ffn_dim = kv.get_or("ffn_dim", e.ffn_dim);
  e.group_boundaries[0] = kv.get_or("group_b0", e.group_boundaries[0]);
  e.group_boundaries[1] = kv.get_or("group_b1", e.group_boundaries[1]);
  if (!(c.augment.keep_min > 0.0 && c.augment.keep_min <= c.augment.keep_max && c.augment.keep_max <= 1.0))
    throw Error(ErrorKind::BadConfig, "augment keep range must satisfy 0 < keep_min <= keep_max <= 1");
  if (!(c.augment.sigma >= 0.0)) throw Error(ErrorKind::BadConfig, "augment_sigma must be >= 0");
  c.validate();

  rc.data_dir = kv.get_or<std::string>("data_dir", "");
  auto& s = rc.synth;
  s.classes = kv.get_or("synth_classes", s.classes);
  s.per_class = kv.get_or("synth_per_class", s.per_class);
  s.noise = kv.get_or("synth_noise", s.noise);
  s.class_scale = kv.get_or("synth_class_scale", s.class_scale);
  s.position_spread = kv.get_or("synth_position_spread", s.position_spread);
  s.seed = kv.get_or<std::uint64_t>("synth_seed", s.seed);
  s.patch_count = e.patch_count;
  s.patch_input_dim = e.patch_input_dim;
  s.validate();
  return rc;
}

}  // namespace mps::run
