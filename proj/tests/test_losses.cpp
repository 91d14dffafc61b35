#include "oracles.hpp"

#include <mps/hms.hpp>
#include <mps/mar.hpp>

#include <gtest/gtest.h>

using namespace mps;

namespace {

FeatureMatrix fm(Matrix m) { return FeatureMatrix(std::move(m)); }

/// Unit rows with a prescribed cosine between row 0 and row 1.
Matrix pair_with_cosine(double c) { return Matrix{{1, 0}, {c, std::sqrt(1.0 - c * c)}}; }

double mar_loss_raw(const FeatureMatrix& fc, const Matrix& tc, const std::vector<FeatureMatrix>& ft,
                    const std::vector<Matrix>& tt) {
  std::vector<FeatureMatrix> tuned;
  for (const auto& m : tt) tuned.emplace_back(m);
  return mar::mar_total({fc, FeatureMatrix(tc)}, {ft, tuned});
}

}  // namespace

// ------------------------------------------------------------------- MAR

TEST(MarGlobal, HandValues) {
  EXPECT_NEAR(mar::mar_global({fm(pair_with_cosine(0)), fm(pair_with_cosine(0.3))}), 0.15, 1e-12);
  Matrix a{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  Matrix b{{1, 0, 0}, {0, 1, 0}, {0.2, 0, std::sqrt(1 - 0.04)}};
  EXPECT_NEAR(mar::mar_global({fm(a), fm(b)}), 0.04444, 1e-5);
  EXPECT_EQ(mar::mar_global({fm(a), fm(a)}), 0.0);
}

TEST(MarLocal, HandValues) {
  const std::vector<FeatureMatrix> frozen{fm(pair_with_cosine(0))};
  const std::vector<FeatureMatrix> tuned{fm(pair_with_cosine(0.5))};
  EXPECT_NEAR(mar::mar_local({frozen, tuned}), 0.25, 1e-12);
  const std::vector<FeatureMatrix> frozen2{fm(pair_with_cosine(0)), fm(pair_with_cosine(0.2))};
  const std::vector<FeatureMatrix> tuned2{fm(pair_with_cosine(0.5)), fm(pair_with_cosine(0.2))};
  EXPECT_NEAR(mar::mar_local({frozen2, tuned2}), 0.125, 1e-12);
}

TEST(MarTotal, SumsParts) {
  const mar::BatchPair batch{fm(pair_with_cosine(0)), fm(pair_with_cosine(0.3))};
  const mar::TokenPair tokens{{fm(pair_with_cosine(0))}, {fm(pair_with_cosine(0.5))}};
  EXPECT_NEAR(mar::mar_total(batch, tokens), 0.40, 1e-12);
}

TEST(MarGlobal, RotationInvariant) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = oracle::random_matrix(6, 5, rng);
    const Matrix q = oracle::random_orthogonal(5, rng);
    EXPECT_LT(mar::mar_global({fm(x), fm(oracle::multiply(x, q))}), 1e-12);
  }
}

TEST(MarGradient, ZeroAtIdentity) {
  std::mt19937_64 rng(2);
  const Matrix c = oracle::random_matrix(3, 4, rng);
  const Matrix t0 = oracle::random_matrix(2, 4, rng);
  const auto g = mar::mar_gradient(fm(c), c, {fm(t0), fm(t0), fm(t0)}, {t0, t0, t0});
  for (double v : g.cls.flat()) EXPECT_EQ(v, 0.0);
  for (const auto& m : g.tokens)
    for (double v : m.flat()) EXPECT_EQ(v, 0.0);
}

TEST(MarGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(99);
  const double h = 1e-5;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 4, d = 3 + trial % 3, m1 = 2 + trial % 2;
    const FeatureMatrix fc(oracle::random_matrix(n, d, rng));
    Matrix tc = oracle::random_matrix(n, d, rng);
    std::vector<FeatureMatrix> ft;
    std::vector<Matrix> tt;
    for (std::size_t i = 0; i < n; ++i) {
      ft.emplace_back(oracle::random_matrix(m1, d, rng));
      tt.push_back(oracle::random_matrix(m1, d, rng));
    }
    const auto g = mar::mar_gradient(fc, tc, ft, tt);
    oracle::GradCheck gc;
    auto probe = [&](double& x, double analytic) {
      const double orig = x;
      x = orig + h;
      const double lp = mar_loss_raw(fc, tc, ft, tt);
      x = orig - h;
      const double lm = mar_loss_raw(fc, tc, ft, tt);
      x = orig;
      const double fd = (lp - lm) / (2 * h);
      gc.max_abs_diff = std::max(gc.max_abs_diff, std::abs(fd - analytic));
      gc.max_abs_fd = std::max(gc.max_abs_fd, std::abs(fd));
    };
    for (std::size_t k = 0; k < tc.size(); ++k) probe(tc.flat()[k], g.cls.flat()[k]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < tt[i].size(); ++k) probe(tt[i].flat()[k], g.tokens[i].flat()[k]);
    EXPECT_LE(gc.relative(), 1e-4) << "trial " << trial;
  }
}

TEST(MarGradient, LinearInLossScale) {
  std::mt19937_64 rng(5);
  const FeatureMatrix fc(oracle::random_matrix(3, 3, rng));
  const Matrix tc = oracle::random_matrix(3, 3, rng);
  const std::vector<FeatureMatrix> ft{fm(oracle::random_matrix(2, 3, rng)), fm(oracle::random_matrix(2, 3, rng)),
                                      fm(oracle::random_matrix(2, 3, rng))};
  const std::vector<Matrix> tt{oracle::random_matrix(2, 3, rng), oracle::random_matrix(2, 3, rng),
                               oracle::random_matrix(2, 3, rng)};
  // The tape route with a weight of 3 on the loss must give 3x the closed form.
  ad::Tape t;
  const ad::Var raw = t.parameter(tc);
  const ad::Var z = ad::normalize_rows(t, raw);
  ad::Var loss = ad::sum_abs(t, ad::sub(t, ad::matmul_nt(t, z, z), t.constant(gram(fc).matrix())), 3.0 / 9.0);
  t.backward(loss);
  const auto g = mar::mar_gradient(fc, tc, ft, tt);
  Matrix expected = g.cls;
  for (double& v : expected.flat()) v *= 3.0;
  EXPECT_LT(max_abs_diff(t.grad(raw), expected), 1e-12);
}

// ------------------------------------------------------------------- HMS

namespace {

/// One query with explicit support similarities; the self copy sits at index 0.
hms::QuerySupport single_query(double pos_sim, double neg_sim) {
  const double r = std::sqrt(1 - neg_sim * neg_sim);
  const Matrix q{{1, 0}};
  const Matrix protos{{pos_sim, std::sqrt(1 - pos_sim * pos_sim)}, {neg_sim, r}};
  const int qlab[] = {0};
  const int plab[] = {0, 1};
  return hms::build_query_support(fm(q), qlab, fm(protos), plab);
}

}  // namespace

TEST(Sculpt, HandValues) {
  // Self copy is excluded, leaving s+ and s- in the denominator.
  const auto qs = single_query(1.0, 0.0);
  EXPECT_NEAR(hms::sculpt_loss(qs, 1.0), 0.31326, 1e-5);
  EXPECT_NEAR(hms::sculpt_loss(qs, 1.0), std::log1p(std::exp(-1.0)), 1e-14);
  EXPECT_NEAR(hms::sculpt_loss(single_query(1.0, 1.0), 1.0), 0.69315, 1e-5);
}

TEST(Sculpt, SinglePositiveNoNegatives) {
  const Matrix q{{1, 0}};
  const int qlab[] = {0};
  const int plab[] = {0};
  const auto qs = hms::build_query_support(fm(q), qlab, fm(Matrix{{0, 1}}), plab);
  EXPECT_NEAR(hms::sculpt_loss(qs, 0.1), 0.0, 1e-15);
}

TEST(Sculpt, PositiveSets) {
  const Matrix imgs{{1, 0}, {0.6, 0.8}};
  const int lab[] = {0, 0};
  const int plab[] = {0, 1};
  const auto qs = hms::build_query_support(fm(imgs), lab, fm(Matrix{{1, 0}, {0, 1}}), plab);
  EXPECT_EQ(qs.positives(0), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(qs.positives(1), (std::vector<std::size_t>{0, 2}));

  const int lab2[] = {0, 1};
  const auto one_each = hms::build_query_support(fm(imgs), lab2, fm(Matrix{{1, 0}, {0, 1}}), plab);
  EXPECT_EQ(one_each.positives(0), (std::vector<std::size_t>{2}));
  EXPECT_EQ(one_each.positives(1), (std::vector<std::size_t>{3}));
}

TEST(Sculpt, EmptyPositivesRejected) {
  const int lab[] = {0};
  const int plab[] = {1};
  try {
    hms::build_query_support(fm(Matrix{{1, 0}}), lab, fm(Matrix{{0, 1}}), plab);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyPositives);
  }
}

TEST(Sculpt, InvariantToQueryOrder) {
  std::mt19937_64 rng(4);
  const Matrix imgs = oracle::random_matrix(6, 4, rng);
  const std::vector<int> lab{0, 1, 0, 2, 1, 2};
  const Matrix protos = oracle::random_matrix(3, 4, rng);
  const int plab[] = {0, 1, 2};
  const double a = hms::sculpt_loss(hms::build_query_support(fm(imgs), lab, fm(protos), plab), 0.2);
  const std::size_t order[] = {5, 3, 1, 0, 4, 2};
  std::vector<int> lab2;
  for (std::size_t i : order) lab2.push_back(lab[i]);
  const double b =
      hms::sculpt_loss(hms::build_query_support(fm(select_rows(imgs, order)), lab2, fm(protos), plab), 0.2);
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(Sculpt, StableAtSmallTemperature) {
  const auto qs = single_query(0.9, -0.9);
  const double v = hms::sculpt_loss(qs, 1e-3);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(v, 0.0);
}

TEST(LayerDecay, Weights) {
  EXPECT_EQ(hms::layer_decay_weights(3, 2), (std::vector<double>{0.5, 1.0}));
  EXPECT_EQ(hms::layer_decay_weights(3, 3), (std::vector<double>{0.25, 0.5, 1.0}));
  EXPECT_EQ(hms::layer_decay_weights(3, 1), (std::vector<double>{1.0}));
  EXPECT_THROW(hms::layer_decay_weights(3, 4), Error);
  EXPECT_THROW(hms::layer_decay_weights(3, 0), Error);
}

TEST(TauSchedule, Endpoints) {
  const hms::HmsConfig cfg;
  EXPECT_DOUBLE_EQ(hms::tau_schedule(0, 50, cfg), 0.5);
  EXPECT_NEAR(hms::tau_schedule(49, 50, cfg), 0.07, 1e-15);
  EXPECT_NEAR(hms::tau_schedule(5, 11, cfg), 0.285, 1e-12);
  for (int e = 1; e < 50; ++e) EXPECT_LE(hms::tau_schedule(e, 50, cfg), hms::tau_schedule(e - 1, 50, cfg));
}

TEST(HmsTotal, WeightedLayers) {
  const auto easy = single_query(1.0, 0.0);   // 0.31326
  const auto flat = single_query(1.0, 1.0);   // 0.69315
  hms::HmsConfig cfg;
  cfg.depth = 2;
  const hms::QuerySupport layers[] = {flat, easy};
  EXPECT_NEAR(hms::hms_total(layers, cfg, 3, 1.0), 0.5 * std::log(2.0) + std::log1p(std::exp(-1.0)), 1e-12);
  cfg.depth = 1;
  const hms::QuerySupport out_only[] = {easy};
  EXPECT_NEAR(hms::hms_total(out_only, cfg, 3, 1.0), hms::sculpt_loss(easy, 1.0), 1e-15);
}
