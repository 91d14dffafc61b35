#include <mps/audit.hpp>
#include <mps/checkpoint.hpp>
#include <mps/run_config.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace mps;

namespace {

struct Globals {
  std::uint64_t seed = 7;
  bool seed_given = false;
  std::string out_dir = ".";
  bool quiet = false;
};

void say(const Globals& g, const std::string& s) {
  if (!g.quiet) std::cout << s << std::flush;
}

fs::path out_path(const Globals& g, const std::string& name) {
  std::error_code ec;
  fs::create_directories(g.out_dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + g.out_dir + ": " + ec.message());
  return fs::path(g.out_dir) / name;
}

data::EmbeddingFile load_csv(const std::string& path) {
  try {
    return data::parse_embedding_csv(enc::read_file(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ParseError) throw Error(ErrorKind::ParseError, path + ": " + e.detail());
    throw;
  }
}

// ----------------------------------------------------------------- synth

struct SynthArgs {
  data::SynthConfig cfg;
  int test_per_class = 32;
};

int cmd_synth(const Globals& g, SynthArgs a, const std::string& argv_line) {
  a.cfg.seed = g.seed;
  a.cfg.validate();
  if (a.test_per_class < 1) throw Error(ErrorKind::BadFlag, "test-per-class must be >= 1");
  const data::SyntheticSource src(a.cfg);
  const auto train = src.draw(a.cfg.per_class, 0);
  const auto test = src.draw(a.test_per_class, 1);
  enc::write_file_atomic(out_path(g, "train.csv"), data::write_embedding_csv(data::to_embedding_file(train)));
  enc::write_file_atomic(out_path(g, "test.csv"), data::write_embedding_csv(data::to_embedding_file(test)));
  std::ostringstream m;
  m << "command=" << argv_line << "\n"
    << "classes=" << a.cfg.classes << "\nper_class=" << a.cfg.per_class << "\ntest_per_class=" << a.test_per_class
    << "\npatch_count=" << a.cfg.patch_count << "\npatch_input_dim=" << a.cfg.patch_input_dim
    << "\nnoise=" << metrics::format_value(a.cfg.noise) << "\nclass_scale=" << metrics::format_value(a.cfg.class_scale)
    << "\nposition_spread=" << metrics::format_value(a.cfg.position_spread) << "\nseed=" << a.cfg.seed << "\n";
  enc::write_file_atomic(out_path(g, "manifest.txt"), m.str());
  say(g, "wrote " + std::to_string(train.size()) + " train and " + std::to_string(test.size()) + " test samples to " +
             g.out_dir + "\n");
  return 0;
}

// ----------------------------------------------------------------- train

data::EmbeddingFile cls_file(const enc::EncoderParams& p, const enc::EncoderConfig& cfg, const data::Dataset& d,
                             const std::vector<std::string>& ids) {
  data::EmbeddingFile f;
  f.ids = ids;
  f.labels = d.labels;
  f.values = enc::encode_cls(p, cfg, d.samples);
  return f;
}

int cmd_train(const Globals& g, const std::string& config_path, bool dry_run) {
  const auto kv = config::KeyValues::parse(enc::read_file(config_path));
  run::RunConfig rc = run::parse_run_config(kv);
  if (g.seed_given) rc.train.seed = g.seed;
  const auto& cfg = rc.train;

  if (dry_run) {
    std::printf("config ok\nwarmup_start_lr=%s\npeak_lr=%s\nepochs=%d\nconsistency_variant=%s\n",
                metrics::format_value(train::lr_schedule(0, 1, cfg)).c_str(),
                metrics::format_value(train::lr_schedule(1, 1, cfg)).c_str(), cfg.epochs,
                train::to_string(cfg.consistency_variant).c_str());
    return 0;
  }

  data::Dataset train_set, test_set;
  std::vector<std::string> test_ids;
  if (!rc.data_dir.empty()) {
    fs::path dir(rc.data_dir);
    if (dir.is_relative()) dir = fs::path(config_path).parent_path() / dir;
    const auto pool_file = load_csv((dir / "train.csv").string());
    const auto test_file = load_csv((dir / "test.csv").string());
    const auto pool = data::from_embedding_file(pool_file, cfg.encoder.patch_count, cfg.encoder.patch_input_dim);
    test_set = data::from_embedding_file(test_file, cfg.encoder.patch_count, cfg.encoder.patch_input_dim);
    const auto split = data::sample_k_shot(pool.labels, cfg.k_shot, cfg.seed);
    train_set = pool.subset(split.train);
    test_ids = test_file.ids;
  } else {
    const auto pool = data::SyntheticSource(rc.synth).draw(rc.synth.per_class, 0);
    auto ex = train::split_pool(pool, cfg.k_shot, cfg.seed);
    train_set = std::move(ex.train);
    test_set = std::move(ex.test);
    for (std::size_t i = 0; i < test_set.size(); ++i) test_ids.push_back("t" + std::to_string(i));
  }
  if (train_set.classes != test_set.classes)
    throw Error(ErrorKind::DimMismatch, "train and test class counts differ");

  train::Trainer trainer(cfg, train_set, test_set);
  const auto before = cls_file(trainer.frozen(), cfg.encoder, test_set, test_ids);
  const auto res = trainer.run();

  std::string report;
  report += "init_mar=" + metrics::format_value(res.init.mar_step0) + "\n";
  report += std::string("init_parallels_zero=") + (res.init.parallels_zero ? "true" : "false") + "\n";
  report += std::string("init_probe_predictions_equal=") + (res.init.probe_predictions_equal ? "true" : "false") + "\n";
  for (const auto& h : res.history) report += h.serialize();
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(res.param_hash));
  report += std::string("param_hash=") + hash + "\n";
  enc::write_file_atomic(out_path(g, "report.txt"), report);
  enc::write_file_atomic(out_path(g, "checkpoint.mpsg"), enc::serialize_checkpoint(res.params, cfg.encoder));
  enc::write_file_atomic(out_path(g, "features_before.csv"), data::write_embedding_csv(before));
  enc::write_file_atomic(out_path(g, "features_after.csv"),
                         data::write_embedding_csv(cls_file(res.params, cfg.encoder, test_set, test_ids)));
  data::EmbeddingFile protos;
  protos.values = trainer.prototypes().matrix();
  for (int c = 0; c < train_set.classes; ++c) {
    protos.ids.push_back("class" + std::to_string(c));
    protos.labels.push_back(c);
  }
  enc::write_file_atomic(out_path(g, "prototypes.csv"), data::write_embedding_csv(protos));

  const auto& last = res.history.back();
  say(g, "epochs=" + std::to_string(res.history.size()) + "\naccuracy=" + metrics::format_value(last.eval.accuracy) +
             "\n" + last.eval.report.serialize() + "param_hash=" + hash + "\n");
  return 0;
}

// ----------------------------------------------------------------- audit / gw

int cmd_audit(const Globals& g, const std::string& before_path, const std::string& after_path,
              const std::string& protos_path, double tau) {
  const auto before = load_csv(before_path);
  const auto after = load_csv(after_path);
  std::optional<data::EmbeddingFile> protos;
  if (!protos_path.empty()) protos = load_csv(protos_path);
  audit::AuditOptions opt;
  opt.seed = g.seed;
  opt.tau = tau;
  const auto rep = audit::run_audit(before, after, protos ? &*protos : nullptr, opt);
  const std::string text = rep.serialize();
  enc::write_file_atomic(out_path(g, "audit.txt"), text);
  say(g, text);
  return 0;
}

int cmd_gw(const Globals& g, const std::string& a_path, const std::string& b_path, int p) {
  gw::check_order(p);
  const auto a = load_csv(a_path);
  const auto b = load_csv(b_path);
  if (a.n() != b.n()) throw Error(ErrorKind::ShapeMismatch, "files hold different sample counts");
  const FeatureMatrix za(a.values), zb(b.values);
  const auto est = gw::gw_estimate(gw::MetricSpace::from_features(za), gw::MetricSpace::from_features(zb), p);
  std::string out = "gw_upper_estimate=" + metrics::format_value(est.value) + "\n";
  out += "coupling=" + gw::to_string(est.kind) + "\n";
  if (est.kind == gw::CouplingKind::Permutation) {
    out += "permutation=";
    for (std::size_t i = 0; i < est.permutation.size(); ++i) out += (i ? " " : "") + std::to_string(est.permutation[i]);
    out += "\npermutation_rank=" + std::to_string(est.permutation_rank) + "\n";
  }
  out += "gram_bound=" + metrics::format_value(gw::gram_bound(gram(za), gram(zb), p)) + "\n";
  out += "p=" + std::to_string(p) + "\n";
  say(g, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geometry-preserving fine-tuning toolkit: synthesize data, train, audit drift, estimate GW"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "random seed")->each([&](const std::string&) { g.seed_given = true; });
  app.add_option("--out-dir", g.out_dir, "output directory");
  app.add_flag("--quiet", g.quiet, "suppress stdout");
  app.fallthrough();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "write synthetic token datasets");
  synth->add_option("--classes", sa.cfg.classes);
  synth->add_option("--per-class", sa.cfg.per_class, "train pool samples per class");
  synth->add_option("--test-per-class", sa.test_per_class);
  synth->add_option("--patches", sa.cfg.patch_count);
  synth->add_option("--dim", sa.cfg.patch_input_dim, "token width");
  synth->add_option("--noise", sa.cfg.noise);
  synth->add_option("--class-scale", sa.cfg.class_scale);
  synth->add_option("--position-spread", sa.cfg.position_spread);

  std::string config_path;
  bool dry_run = false;
  auto* trn = app.add_subcommand("train", "train from a key = value config file");
  trn->add_option("config", config_path)->required();
  trn->add_flag("--dry-run", dry_run, "validate and print the schedule endpoints");

  std::string before_path, after_path, protos_path;
  double tau = 0.01;
  auto* aud = app.add_subcommand("audit", "compare embeddings before and after fine-tuning");
  aud->add_option("before", before_path)->required();
  aud->add_option("after", after_path)->required();
  aud->add_option("--prototypes", protos_path, "class prototype file, enables logit metrics");
  aud->add_option("--tau", tau, "prototype logit temperature");

  std::string a_path, b_path;
  int p = 1;
  auto* gwc = app.add_subcommand("gw", "GW upper estimate between two small embedding files");
  gwc->add_option("a", a_path)->required();
  gwc->add_option("b", b_path)->required();
  gwc->add_option("--p", p, "order, 1 or 2");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::string argv_line;
  for (int i = 1; i < argc; ++i) argv_line += (i > 1 ? " " : "") + std::string(argv[i]);

  try {
    if (*synth) return cmd_synth(g, sa, argv_line);
    if (*trn) return cmd_train(g, config_path, dry_run);
    if (*aud) return cmd_audit(g, before_path, after_path, protos_path, tau);
    if (*gwc) return cmd_gw(g, a_path, b_path, p);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
