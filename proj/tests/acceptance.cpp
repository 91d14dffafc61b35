// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Usage: acceptance <path-to-mps-cli> [criterion numbers...]

#include "oracles.hpp"

#include <mps/audit.hpp>
#include <mps/gw.hpp>
#include <mps/hms.hpp>
#include <mps/mar.hpp>
#include <mps/metrics.hpp>
#include <mps/trainer.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

using namespace mps;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Matrix unit(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  return oracle::unit_rows(oracle::random_matrix(n, d, rng));
}

// ---------------------------------------------------------------- 1..3

Outcome natural_coupling_identity() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(i % 7), d = 2 + static_cast<std::size_t>((i * 5) % 15);
    const int p = 1 + i % 2;
    const FeatureMatrix a(unit(n, d, rng)), b(unit(n, d, rng));
    const double cost = gw::coupling_cost(gw::MetricSpace::from_features(a), gw::MetricSpace::from_features(b),
                                          gw::coupling_natural(n), p);
    worst = std::max(worst, std::abs(cost - gw::gram_bound(gram(a), gram(b), p)));
  }
  const double secs = seconds_since(t0);
  o.require(worst <= 1e-12, "max gap " + fmt("%.3g", worst));
  o.require(secs < 1.0, "took " + fmt("%.2f", secs) + " s");
  o.detail = "max |cost - bound| = " + fmt("%.3g", worst) + ", " + fmt("%.3f", secs) + " s" +
             (o.detail.empty() ? "" : " (" + o.detail + ")");
  return o;
}

Outcome upper_bound_certification() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(202);
  double worst_excess = -1e300;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(i % 5), d = 2 + static_cast<std::size_t>(i % 9);
    const int p = 1 + i % 2;
    const FeatureMatrix a(unit(n, d, rng)), b(unit(n, d, rng));
    const auto est = gw::gw_estimate(gw::MetricSpace::from_features(a), gw::MetricSpace::from_features(b), p);
    worst_excess = std::max(worst_excess, std::pow(est.value, p) - gw::gram_bound(gram(a), gram(b), p));
  }
  // Asymmetric case: the second set is the first with rows reordered, so the
  // natural pairing is wrong while a permutation matches exactly.
  const Matrix base = unit(5, 4, rng);
  const std::size_t order[] = {2, 4, 0, 1, 3};
  const FeatureMatrix a(base), b(select_rows(base, order));
  const auto x = gw::MetricSpace::from_features(a), y = gw::MetricSpace::from_features(b);
  const auto est = gw::gw_estimate(x, y, 1);
  const double natural = gw::coupling_cost(x, y, gw::coupling_natural(5), 1);
  const double secs = seconds_since(t0);
  o.require(worst_excess <= 1e-12, "estimate exceeds bound by " + fmt("%.3g", worst_excess));
  o.require(est.kind == gw::CouplingKind::Permutation && est.cost < natural, "permutation search not below natural");
  o.require(secs < 5.0, "took " + fmt("%.2f", secs) + " s");
  o.detail = "max (est^p - bound) = " + fmt("%.3g", worst_excess) + ", asymmetric case: permutation " +
             fmt("%.3g", est.cost) + " < natural " + fmt("%.4f", natural) + ", " + fmt("%.3f", secs) + " s" +
             (o.detail.empty() ? "" : " (" + o.detail + ")");
  return o;
}

Outcome isometry_zero() {
  Outcome o;
  std::mt19937_64 rng(303);
  double worst_gw = 0.0, worst_mar = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(i % 5), d = 2 + static_cast<std::size_t>(i % 7);
    const Matrix x = oracle::random_matrix(n, d, rng);
    const Matrix rx = oracle::multiply(x, oracle::random_orthogonal(d, rng));
    const FeatureMatrix a(x), b(rx);
    worst_gw = std::max(worst_gw, gw::gw_estimate(gw::MetricSpace::from_features(a), gw::MetricSpace::from_features(b),
                                                  1 + i % 2)
                                      .value);
    worst_mar = std::max(worst_mar, mar::mar_global({a, b}));
  }
  o.require(worst_gw <= 1e-10, "gw " + fmt("%.3g", worst_gw));
  o.require(worst_mar <= 1e-10, "mar " + fmt("%.3g", worst_mar));
  o.detail = "max gw = " + fmt("%.3g", worst_gw) + ", max mar_global = " + fmt("%.3g", worst_mar);
  return o;
}

// ---------------------------------------------------------------- 4..5

Outcome gradient_fidelity() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst[3] = {0, 0, 0};
  const oracle::LossPart parts[] = {oracle::LossPart::Ce, oracle::LossPart::Mar, oracle::LossPart::Hms};
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    const auto ti = oracle::make_tiny(seed);
    for (int k = 0; k < 3; ++k) worst[k] = std::max(worst[k], oracle::check_tiny(ti, parts[k]).relative());
  }
  const double secs = seconds_since(t0);
  const char* names[] = {"ce", "mar", "hms"};
  for (int k = 0; k < 3; ++k) o.require(worst[k] <= 1e-4, std::string(names[k]) + " rel " + fmt("%.3g", worst[k]));
  o.require(secs < 30.0, "took " + fmt("%.1f", secs) + " s");
  o.detail = "max rel error ce " + fmt("%.2g", worst[0]) + ", mar " + fmt("%.2g", worst[1]) + ", hms " +
             fmt("%.2g", worst[2]) + ", " + fmt("%.1f", secs) + " s" + (o.detail.empty() ? "" : " (" + o.detail + ")");
  return o;
}

Outcome hand_values() {
  Outcome o;
  auto check = [&](const std::string& name, double got, double want) {
    o.require(std::abs(got - want) <= 1e-4, name + " " + fmt("%.6g", got) + " vs " + fmt("%.6g", want));
  };
  const double r = 1.0 / std::sqrt(2.0);
  const auto g = gram(FeatureMatrix(Matrix{{1, 0}, {0, 1}, {r, r}}));
  check("gram", g(0, 2), 0.70711);

  auto pair = [](double c) { return FeatureMatrix(Matrix{{1, 0}, {c, std::sqrt(1 - c * c)}}); };
  check("mar_global two-point", mar::mar_global({pair(0), pair(0.3)}), 0.15);
  const Matrix e3{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const Matrix moved{{1, 0, 0}, {0, 1, 0}, {0.2, 0, std::sqrt(0.96)}};
  check("mar_global three-point", mar::mar_global({FeatureMatrix(e3), FeatureMatrix(moved)}), 0.04444);

  auto query = [](double pos, double neg) {
    const int ql[] = {0}, pl[] = {0, 1};
    return hms::build_query_support(FeatureMatrix(Matrix{{1, 0}}), ql,
                                    FeatureMatrix(Matrix{{pos, std::sqrt(1 - pos * pos)}, {neg, std::sqrt(1 - neg * neg)}}),
                                    pl);
  };
  check("sculpt", hms::sculpt_loss(query(1, 0), 1.0), 0.31326);
  check("sculpt symmetric", hms::sculpt_loss(query(1, 1), 1.0), 0.69315);

  const auto w2 = hms::layer_decay_weights(3, 2), w3 = hms::layer_decay_weights(3, 3);
  o.require(w2 == std::vector<double>{0.5, 1.0}, "decay weights depth 2");
  o.require(w3 == std::vector<double>{0.25, 0.5, 1.0}, "decay weights depth 3");

  const double z[] = {1, 0};
  const auto p = train::classify(z, FeatureMatrix(Matrix{{0.8, 0.6}, {0.2, std::sqrt(0.96)}}), 1.0);
  check("classify[0]", p[0], 0.64566);
  check("classify[1]", p[1], 0.35434);
  check("kl", train::consistency_baseline(train::ConsistencyVariant::LogitKl, Matrix{{std::log(0.5), std::log(0.5)}},
                                          Matrix{{std::log(0.9), std::log(0.1)}}),
        0.51083);
  const double h1[] = {1, 0}, h2[] = {0.5, 0.5};
  check("hellinger", metrics::hellinger(h1, h2), 0.54120);

  const Matrix line{{0}, {1}, {4}, {5}};
  const int lab[] = {0, 0, 1, 1};
  check("calinski_harabasz", metrics::calinski_harabasz(line, lab), 32.0);
  const auto sil = metrics::silhouette_samples(line, lab);
  check("silhouette point 0", sil[0], 0.77778);
  const double sx[] = {1, 2, 3}, sy[] = {1, 3, 2};
  check("spearman", metrics::spearman(sx, sy), 0.5);
  o.detail = std::string(o.pass ? "all 16 values within 1e-4" : "") +
             ", silhouette mean over the 4 points = " + fmt("%.5f", metrics::silhouette(line, lab)) +
             " (inner points score 0.71429)";
  return o;
}

// ---------------------------------------------------------------- training

data::Dataset pool_for(std::uint64_t seed) {
  data::SynthConfig sc;
  sc.seed = seed;
  return data::SyntheticSource(sc).draw(sc.per_class, 0);
}

train::TrainConfig config_for(std::uint64_t seed, double lambda1, double lambda2) {
  train::TrainConfig c;
  c.seed = seed;
  c.lambda1 = lambda1;
  c.lambda2 = lambda2;
  return c;
}

struct DefaultRun {
  train::TrainResult result;
  double seconds = 0.0;
  std::uint64_t repeat_hash = 0;
};

const DefaultRun& default_run() {
  static const DefaultRun run = [] {
    DefaultRun r;
    const auto cfg = config_for(1, 0.5, 0.1);
    const auto ex = train::split_pool(pool_for(1), cfg.k_shot, 1);
    const auto t0 = std::chrono::steady_clock::now();
    r.result = train::train(cfg, ex.train, ex.test);
    r.seconds = seconds_since(t0);
    r.repeat_hash = train::train(cfg, ex.train, ex.test).param_hash;
    return r;
  }();
  return run;
}

Outcome initialization_invariants() {
  Outcome o;
  const auto& init = default_run().result.init;
  o.require(init.mar_step0 == 0.0, "mar at step 0 = " + fmt("%.3g", init.mar_step0));
  o.require(init.parallels_zero, "parallel linears not zero");
  o.require(init.probe_size == 64, "probe size " + std::to_string(init.probe_size));
  o.require(init.probe_predictions_equal, "probe predictions differ from the frozen model");
  o.detail = "mar_step0 = " + fmt("%g", init.mar_step0) + ", parallels zero, " + std::to_string(init.probe_size) +
             "-sample probe " + (init.probe_predictions_equal ? "matches" : "differs") +
             (o.detail.empty() ? "" : " (" + o.detail + ")");
  return o;
}

Outcome desk_scale_training() {
  Outcome o;
  const auto& run = default_run();
  const auto& hist = run.result.history;
  double best = 0.0;
  int first = -1;
  for (const auto& h : hist) {
    best = std::max(best, h.eval.accuracy);
    if (first < 0 && h.eval.accuracy >= 0.95) first = h.epoch;
  }
  const double final_acc = run.result.final_eval().accuracy;
  o.require(hist.size() == 50, "epochs " + std::to_string(hist.size()));
  o.require(final_acc >= 0.95, "final accuracy " + fmt("%.4f", final_acc));
  o.require(run.seconds < 60.0, "took " + fmt("%.1f", run.seconds) + " s");
  o.require(run.repeat_hash == run.result.param_hash, "rerun changed the parameter hash");
  o.detail = "8 classes, K=16, final accuracy " + fmt("%.4f", final_acc) + " (>= 0.95 from epoch " +
             std::to_string(first) + "), " + fmt("%.1f", run.seconds) + " s, rerun hash " +
             (run.repeat_hash == run.result.param_hash ? "identical" : "different") +
             (o.detail.empty() ? "" : " (" + o.detail + ")");
  return o;
}

struct SeedSweep {
  std::vector<double> rsa_ce, rsa_mar, ch_ce, ch_hms;
};

const SeedSweep& seed_sweep() {
  static const SeedSweep sweep = [] {
    SeedSweep s;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto ex = train::split_pool(pool_for(seed), 16, seed);
      auto metric = [](const metrics::Metric& m) { return m.present() ? *m.value : std::nan(""); };
      const auto ce = train::train(config_for(seed, 0.0, 0.0), ex.train, ex.test).final_eval().report;
      const auto ma = train::train(config_for(seed, 0.5, 0.0), ex.train, ex.test).final_eval().report;
      const auto hm = train::train(config_for(seed, 0.0, 0.1), ex.train, ex.test).final_eval().report;
      s.rsa_ce.push_back(metric(ce.rsa));
      s.rsa_mar.push_back(metric(ma.rsa));
      s.ch_ce.push_back(metric(ce.calinski_harabasz));
      s.ch_hms.push_back(metric(hm.calinski_harabasz));
    }
    return s;
  }();
  return sweep;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

Outcome rsa_direction() {
  Outcome o;
  const auto& s = seed_sweep();
  const double a = mean(s.rsa_mar), b = mean(s.rsa_ce);
  o.require(a >= b, "MAR below CE-only");
  o.detail = "mean rsa MAR " + fmt("%.4f", a) + " vs CE-only " + fmt("%.4f", b) + ", gap " + fmt("%+.4f", a - b);
  return o;
}

Outcome ch_direction() {
  Outcome o;
  const auto& s = seed_sweep();
  const double a = mean(s.ch_hms), b = mean(s.ch_ce);
  o.require(a >= b, "HMS below CE-only");
  o.detail = "mean CH HMS " + fmt("%.2f", a) + " vs CE-only " + fmt("%.2f", b) + ", gap " + fmt("%+.2f", a - b);
  return o;
}

Outcome ablation_wiring() {
  Outcome o;
  data::SynthConfig sc;
  sc.classes = 4;
  sc.per_class = 12;
  const auto ex = train::split_pool(data::SyntheticSource(sc).draw(sc.per_class, 0), 4, 1);
  std::set<std::string> report_keys;
  int runs = 0;
  auto run = [&](const std::string& name, train::TrainConfig c) {
    c.epochs = 2;
    c.k_shot = 4;
    c.batch_size = 8;
    try {
      const auto res = train::train(c, ex.train, ex.test);
      const std::string rep = res.final_eval().report.serialize();
      std::set<std::string> keys;
      std::istringstream in(rep);
      for (std::string line; std::getline(in, line);) keys.insert(line.substr(0, line.find('=')));
      if (report_keys.empty()) report_keys = keys;
      o.require(keys == report_keys, name + " report has different fields");
      o.require(std::isfinite(res.history.back().mean.total), name + " non-finite loss");
      ++runs;
    } catch (const std::exception& e) {
      o.require(false, name + ": " + e.what());
    }
  };
  for (auto v : train::kAllVariants) {
    auto c = config_for(1, 0.5, 0.1);
    c.consistency_variant = v;
    run("variant " + train::to_string(v), c);
  }
  run("CE", config_for(1, 0.0, 0.0));
  run("CE+MAR", config_for(1, 0.5, 0.0));
  run("CE+HMS", config_for(1, 0.0, 0.1));
  run("CE+MAR+HMS", config_for(1, 0.5, 0.1));
  o.detail = std::to_string(runs) + " of " + std::to_string(std::size(train::kAllVariants) + 4) +
             " runs completed with identical report fields" + (o.detail.empty() ? "" : " (" + o.detail + ")");
  return o;
}

// ---------------------------------------------------------------- CLI

struct Command {
  int status = -1;
  std::string output;
};

Command run_command(const std::string& cmd) {
  Command c;
  FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
  if (!pipe) return c;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) c.output += buf;
  const int raw = pclose(pipe);
  c.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return c;
}

std::string field(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
  return {};
}

Outcome cli_contract(const std::string& cli) {
  Outcome o;
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("mps_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  std::mt19937_64 rng(1111);
  data::EmbeddingFile before;
  before.values = oracle::random_matrix(40, 12, rng);
  for (int i = 0; i < 40; ++i) {
    before.ids.push_back("e" + std::to_string(i));
    before.labels.push_back(i % 4);
  }
  auto after = before;
  after.values = oracle::multiply(before.values, oracle::random_orthogonal(12, rng));
  std::ofstream(dir / "before.csv") << data::write_embedding_csv(before);
  std::ofstream(dir / "after.csv") << data::write_embedding_csv(after);
  std::ofstream(dir / "bad.csv") << "id,label,f0,f1\na,0,1.0,2.0\nb,1,3.0\n";

  const std::string q = "\"";
  const auto audit = run_command(q + cli + q + " --out-dir " + q + dir.string() + q + " audit " + q +
                                 (dir / "before.csv").string() + q + " " + q + (dir / "after.csv").string() + q);
  const std::string bound = field(audit.output, "gram_bound_p1"), rsa = field(audit.output, "rsa");
  o.require(audit.status == 0, "audit exit " + std::to_string(audit.status));
  o.require(!bound.empty() && std::stod(bound) <= 1e-9, "gram_bound " + bound);
  o.require(!rsa.empty() && std::stod(rsa) == 1.0, "rsa " + rsa);

  const auto bad = run_command(q + cli + q + " --out-dir " + q + dir.string() + q + " audit " + q +
                               (dir / "bad.csv").string() + q + " " + q + (dir / "after.csv").string() + q);
  o.require(bad.status == 3, "malformed csv exit " + std::to_string(bad.status));
  o.require(bad.output.find("line 3") != std::string::npos, "no line number in: " + bad.output);
  fs::remove_all(dir);

  std::string msg = bad.output;
  while (!msg.empty() && msg.back() == '\n') msg.pop_back();
  o.detail = "rotated audit gram_bound_p1=" + bound + " rsa=" + rsa + "; malformed csv exit " +
             std::to_string(bad.status) + " \"" + msg + "\"" + (o.detail.empty() ? "" : " (" + o.detail + ")");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <mps-cli> [criteria...]\n");
    return 2;
  }
  const std::string cli = argv[1];
  std::set<int> only;
  for (int i = 2; i < argc; ++i) only.insert(std::atoi(argv[i]));

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, natural_coupling_identity},
      {2, upper_bound_certification},
      {3, isometry_zero},
      {4, gradient_fidelity},
      {5, hand_values},
      {6, initialization_invariants},
      {7, desk_scale_training},
      {8, rsa_direction},
      {9, ch_direction},
      {10, ablation_wiring},
      {11, [&] { return cli_contract(cli); }},
  };
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && !only.contains(id)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %d: %s\n", o.pass ? "PASS" : "FAIL", id, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
