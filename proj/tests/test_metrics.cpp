#include "oracles.hpp"

#include <mps/metrics.hpp>

#include <gtest/gtest.h>

using namespace mps;
using namespace mps::metrics;

namespace {

Matrix column(std::initializer_list<double> v) {
  Matrix m(v.size(), 1);
  std::size_t i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

std::vector<double> upper(const Matrix& g) {
  std::vector<double> out;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = i + 1; j < g.cols(); ++j) out.push_back(1.0 - g(i, j));
  return out;
}

}  // namespace

TEST(Spearman, HandValues) {
  const std::vector<double> x{1, 2, 3}, y{1, 3, 2}, rev{3, 2, 1};
  EXPECT_NEAR(spearman(x, y), 0.5, 1e-12);
  EXPECT_NEAR(spearman(x, x), 1.0, 1e-15);
  EXPECT_NEAR(spearman(x, rev), -1.0, 1e-15);
}

TEST(Spearman, TiesShareAverageRank) {
  const std::vector<double> x{1, 1, 2, 3};
  EXPECT_EQ(average_ranks(x), (std::vector<double>{1.5, 1.5, 3, 4}));
  // With ties the rank formula no longer holds; Pearson on ranks does.
  const std::vector<double> y{1, 2, 3, 4};
  EXPECT_NEAR(spearman(x, y), 0.9486832980505138, 1e-12);
}

TEST(Spearman, Errors) {
  const std::vector<double> c{2, 2, 2}, x{1, 2, 3}, one{1};
  EXPECT_THROW(spearman(c, x), Error);
  EXPECT_THROW(spearman(one, one), Error);
  EXPECT_THROW(spearman(x, one), Error);
}

TEST(Rsa, MatchesBruteForceAndIsRankInvariant) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 4 + trial % 5;
    const Matrix a = oracle::gram(oracle::unit_rows(oracle::random_matrix(n, 3, rng)));
    const Matrix b = oracle::gram(oracle::unit_rows(oracle::random_matrix(n, 3, rng)));
    EXPECT_NEAR(rsa(GramMatrix(a), GramMatrix(b)), oracle::spearman_distinct(upper(a), upper(b)), 1e-12);
    EXPECT_NEAR(rsa(GramMatrix(a), GramMatrix(a)), 1.0, 1e-12);
    Matrix cubed = b;
    for (double& v : cubed.flat()) v = v * v * v;
    EXPECT_NEAR(rsa(GramMatrix(a), GramMatrix(cubed)), rsa(GramMatrix(a), GramMatrix(b)), 1e-12);
  }
  EXPECT_THROW(rsa(GramMatrix(Matrix::identity(2)), GramMatrix(Matrix::identity(2))), Error);
}

TEST(CalinskiHarabasz, HandValues) {
  const int labels[] = {0, 0, 1, 1};
  EXPECT_NEAR(calinski_harabasz(column({0, 1, 4, 5}), labels), 32.0, 1e-12);
  const int interleaved[] = {0, 1, 0, 1};
  EXPECT_NEAR(calinski_harabasz(column({0, 0, 2, 2}), interleaved), 0.0, 1e-15);
}

TEST(CalinskiHarabasz, MatchesOracle) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix x = oracle::random_matrix(12, 3, rng);
    std::vector<int> labels(12);
    for (int i = 0; i < 12; ++i) labels[static_cast<std::size_t>(i)] = (i * 7 + trial) % 3;
    EXPECT_NEAR(calinski_harabasz(x, labels), oracle::calinski_harabasz(x, labels), 1e-10);
  }
}

TEST(CalinskiHarabasz, DegenerateCases) {
  const int labels[] = {0, 0, 1, 1};
  EXPECT_TRUE(std::isinf(calinski_harabasz(column({1, 1, 3, 3}), labels)));
  const int one[] = {0, 0, 0};
  EXPECT_THROW(calinski_harabasz(column({0, 1, 2}), one), Error);
  const int two[] = {0, 1};
  EXPECT_THROW(calinski_harabasz(column({0, 1}), two), Error);
}

TEST(Silhouette, HandValues) {
  const int labels[] = {0, 0, 1, 1};
  // Outer points: a=1, b=4.5. Inner points: a=1, b=3.5.
  const auto s = silhouette_samples(column({0, 1, 4, 5}), labels);
  EXPECT_NEAR(s[0], 0.77778, 1e-5);
  EXPECT_NEAR(s[3], 7.0 / 9.0, 1e-12);
  EXPECT_NEAR(s[1], 5.0 / 7.0, 1e-12);
  EXPECT_NEAR(silhouette(column({0, 1, 4, 5}), labels), (7.0 / 9.0 + 5.0 / 7.0) / 2.0, 1e-12);
  const int interleaved[] = {0, 1, 0, 1};
  EXPECT_LE(silhouette(column({0, 0, 1, 1}), interleaved), 0.0);
}

TEST(Silhouette, SingletonContributesZeroAndMatchesOracle) {
  const int labels[] = {0, 0, 1};
  // Points 0 and 1: a=1, b=4.5 and 3.5, the singleton contributes 0.
  const double expect = ((4.5 - 1) / 4.5 + (3.5 - 1) / 3.5) / 3.0;
  EXPECT_NEAR(silhouette(column({0, 1, 4.5}), labels), expect, 1e-12);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix x = oracle::random_matrix(10, 2, rng);
    std::vector<int> lab(10);
    for (int i = 0; i < 10; ++i) lab[static_cast<std::size_t>(i)] = (i + trial) % 3;
    EXPECT_NEAR(silhouette(x, lab), oracle::silhouette(x, lab), 1e-12);
  }
}

TEST(Hellinger, HandValuesAndProperties) {
  const std::vector<double> a{1, 0}, b{0.5, 0.5}, c{0, 1};
  EXPECT_NEAR(hellinger(a, b), 0.54120, 1e-5);
  EXPECT_NEAR(hellinger(a, c), 1.0, 1e-15);
  EXPECT_EQ(hellinger(b, b), 0.0);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<std::vector<double>> p(3, std::vector<double>(4));
    for (auto& v : p) {
      double s = 0;
      for (double& x : v) s += (x = u(rng));
      for (double& x : v) x /= s;
    }
    EXPECT_NEAR(hellinger(p[0], p[1]), hellinger(p[1], p[0]), 1e-15);
    EXPECT_LE(hellinger(p[0], p[2]), hellinger(p[0], p[1]) + hellinger(p[1], p[2]) + 1e-15);
  }
  const std::vector<double> bad{0.6, 0.6};
  try {
    hellinger(bad, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotAProbability);
  }
}

TEST(CosineShift, HandValues) {
  const FeatureMatrix z(Matrix{{1, 0}, {0, 1}});
  EXPECT_EQ(cosine_shift(z, z), 0.0);
  EXPECT_NEAR(cosine_shift(z, FeatureMatrix(Matrix{{0, 1}, {-1, 0}})), 1.0, 1e-15);
  EXPECT_NEAR(cosine_shift(z, FeatureMatrix(Matrix{{1, 0}, {1, 0}})), 0.5, 1e-15);
  EXPECT_THROW(cosine_shift(z, FeatureMatrix(Matrix{{1, 0}})), Error);
}

TEST(LogitMetrics, HellingerAndSpearmanMeans) {
  const Matrix a{{1, 2, 3}, {0, 0, 0}};
  EXPECT_NEAR(hellinger_mean(a, a), 0.0, 1e-7);
  // The constant row is skipped, leaving one identical-order row.
  EXPECT_NEAR(spearman_rows_mean(a, Matrix{{2, 4, 6}, {1, 2, 3}}), 1.0, 1e-12);
  EXPECT_THROW(spearman_rows_mean(Matrix{{1, 1}}, Matrix{{1, 2}}), Error);
}

TEST(MetricReport, SerializationFormat) {
  MetricReport r;
  r.rsa = Metric::of(0.123456789012);
  r.calinski_harabasz = Metric::of(std::numeric_limits<double>::infinity());
  r.silhouette = try_metric([]() -> double { throw Error(ErrorKind::DegenerateClustering, "x"); });
  const std::string s = r.serialize();
  EXPECT_NE(s.find("rsa=0.123456789\n"), std::string::npos);
  EXPECT_NE(s.find("calinski_harabasz=inf\n"), std::string::npos);
  EXPECT_NE(s.find("silhouette=skipped:DegenerateClustering\n"), std::string::npos);
  EXPECT_NE(s.find("cosine_shift_mean=skipped:"), std::string::npos);
}
