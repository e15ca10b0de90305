#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "sgmm/rng.hpp"
#include "sgmm/stats_pool.hpp"

using namespace sgmm;

namespace {

Matrix random_matrix(SplitMix64& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  Matrix m(r, c);
  for (double& v : m.flat()) v = rng.normal(0.0, sd);
  return m;
}

GmmModel random_diag_ubm(SplitMix64& rng, std::size_t k, std::size_t d) {
  std::vector<double> w(k);
  double s = 0.0;
  for (double& v : w) s += (v = rng.uniform(0.2, 1.0));
  for (double& v : w) v /= s;
  Matrix var(k, d);
  for (double& v : var.flat()) v = rng.uniform(0.5, 2.0);
  return GmmModel(w, random_matrix(rng, k, d, 1.5), {CovKind::kDiagonal, var});
}

// Posterior from the explicit diagonal Gaussian density, no log-space tricks.
std::vector<double> direct_posterior(const GmmModel& m, std::span<const double> x) {
  const std::size_t k = m.num_components(), d = m.dim();
  std::vector<double> p(k);
  double z = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double dens = m.weights()[c];
    for (std::size_t j = 0; j < d; ++j) {
      const double v = m.variance(c, j);
      const double r = x[j] - m.means()(c, j);
      dens *= std::exp(-0.5 * r * r / v) / std::sqrt(2 * std::numbers::pi * v);
    }
    p[c] = dens;
    z += dens;
  }
  for (double& v : p) v /= z;
  return p;
}

// Well separated 1-D centers at -10, 0, 10 with unit variance.
GmmModel separated_ubm() {
  Matrix mu(3, 1);
  mu(0, 0) = -10.0;
  mu(2, 0) = 10.0;
  return GmmModel({1.0 / 3, 1.0 / 3, 1.0 / 3}, mu, {CovKind::kSharedSpherical, Matrix(1, 1, 1.0)});
}

// Stats where every frame lands in cluster 0 or 1 of a 2-cluster 1-D UBM.
SufficientStats manual_stats(std::vector<double> n, std::vector<double> sx, std::vector<double> sx2) {
  SufficientStats s;
  s.n = n;
  s.sx.resize(n.size(), 1);
  s.sx2_diag.resize(n.size(), 1);
  for (std::size_t k = 0; k < n.size(); ++k) {
    s.sx(k, 0) = sx[k];
    s.sx2_diag(k, 0) = sx2[k];
  }
  double t = 0.0;
  for (double v : n) t += v;
  s.frames = static_cast<std::size_t>(t);
  return s;
}

GmmModel ubm_1d(double mu0, double mu1, double var) {
  Matrix mu(2, 1);
  mu(0, 0) = mu0;
  mu(1, 0) = mu1;
  return GmmModel({0.5, 0.5}, mu, {CovKind::kSharedSpherical, Matrix(1, 1, var)});
}

}  // namespace

TEST(Accumulate, SingleComponent) {
  SplitMix64 rng(1);
  const Matrix x = random_matrix(rng, 7, 3);
  const GmmModel ubm({1.0}, Matrix(1, 3), {CovKind::kDiagonal, Matrix(1, 3, 1.0)});
  const auto s = accumulate(ubm, x);
  EXPECT_EQ(s.n[0], 7.0);
  for (std::size_t d = 0; d < 3; ++d) {
    double sum = 0.0;
    for (std::size_t t = 0; t < 7; ++t) sum += x(t, d);
    EXPECT_NEAR(s.sx(0, d), sum, 1e-12);
  }
}

TEST(Accumulate, HardAssignmentLimit) {
  const auto s = accumulate(separated_ubm(), Matrix(1, 1, 9.7));
  EXPECT_NEAR(s.sx(2, 0), 9.7, 1e-12);
  EXPECT_NEAR(s.sx(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(s.sx(1, 0), 0.0, 1e-12);
  EXPECT_NEAR(s.n[2], 1.0, 1e-12);
}

TEST(Accumulate, MatchesBruteForceLoop) {
  SplitMix64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const GmmModel ubm = random_diag_ubm(rng, 3, 2);
    const Matrix x = random_matrix(rng, 5, 2, 2.0);
    const auto s = accumulate(ubm, x);
    std::vector<double> n(3, 0.0);
    Matrix sx(3, 2), sx2(3, 2);
    for (std::size_t t = 0; t < 5; ++t) {
      const auto p = direct_posterior(ubm, x.row(t));
      for (std::size_t k = 0; k < 3; ++k) {
        n[k] += p[k];
        for (std::size_t d = 0; d < 2; ++d) {
          sx(k, d) += p[k] * x(t, d);
          sx2(k, d) += p[k] * x(t, d) * x(t, d);
        }
      }
    }
    double total = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      total += s.n[k];
      EXPECT_NEAR(s.n[k], n[k], 1e-12);
      for (std::size_t d = 0; d < 2; ++d) {
        EXPECT_NEAR(s.sx(k, d), sx(k, d), 1e-11);
        EXPECT_NEAR(s.sx2_diag(k, d), sx2(k, d), 1e-10);
      }
    }
    EXPECT_NEAR(total, 5.0, 1e-9);
  }
}

TEST(Accumulate, FullSecondOrderAndDimensionMismatch) {
  SplitMix64 rng(3);
  const GmmModel ubm = random_diag_ubm(rng, 2, 3);
  const Matrix x = random_matrix(rng, 4, 3);
  const auto s = accumulate(ubm, x, SecondOrder::kFull);
  ASSERT_EQ(s.sx2_full.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(s.sx2_full[k](d, d), s.sx2_diag(k, d), 1e-12);
  }
  EXPECT_THROW(accumulate(ubm, Matrix(2, 4)), std::invalid_argument);
}

TEST(MlEstimates, SingleAndTwoPointFrames) {
  const GmmModel ubm = separated_ubm();
  const auto one = ml_estimates(accumulate(ubm, Matrix(1, 1, 10.3)), ubm);
  EXPECT_NEAR(one.means(2, 0), 10.3, 1e-12);
  EXPECT_NEAR(one.weights[2], 1.0, 1e-12);

  // x and -x both near cluster 1 (center 0) with hard assignment via manual stats.
  const auto two = ml_estimates(manual_stats({0.0, 2.0}, {0.0, 0.0}, {0.0, 2 * 0.7 * 0.7}),
                                ubm_1d(-5.0, 0.0, 1.0));
  EXPECT_EQ(two.means(1, 0), 0.0);
  EXPECT_NEAR(two.variances(1, 0), 0.49, 1e-15);
  // Zero-count cluster falls back to the UBM.
  EXPECT_EQ(two.means(0, 0), -5.0);
  EXPECT_EQ(two.variances(0, 0), 1.0);
}

TEST(MlEstimates, MatchesDefinitions) {
  SplitMix64 rng(4);
  const GmmModel ubm = random_diag_ubm(rng, 4, 3);
  const auto s = accumulate(ubm, random_matrix(rng, 12, 3));
  const auto ml = ml_estimates(s, ubm);
  double total = 0.0;
  for (double v : s.n) total += v;
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(ml.weights[k], s.n[k] / total, 1e-15);
    for (std::size_t d = 0; d < 3; ++d) {
      const double mu = s.sx(k, d) / s.n[k];
      EXPECT_NEAR(ml.means(k, d), mu, 1e-12);
      EXPECT_NEAR(ml.variances(k, d), s.sx2_diag(k, d) / s.n[k] - mu * mu, 1e-9);
    }
  }
}

TEST(MlEstimates, AllZeroThrows) {
  EXPECT_THROW(ml_estimates(manual_stats({0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}), ubm_1d(0, 1, 1)),
               std::invalid_argument);
}

TEST(Relevance, ZeroCountAndMonotonicity) {
  EXPECT_EQ(relevance(0.0, 0.0), 0.0);
  EXPECT_EQ(relevance(0.0, 5.0), 0.0);
  EXPECT_EQ(relevance(1.0, 1.0), 0.5);
  SplitMix64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const double n = rng.uniform(0.01, 50.0), g = rng.uniform(0.01, 50.0);
    EXPECT_LT(relevance(n, g), relevance(n * 1.5, g));
    EXPECT_GT(relevance(n, g), relevance(n, g * 1.5));
  }
}

TEST(Smoothed, GammaZeroEqualsMlExactly) {
  SplitMix64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const GmmModel ubm = random_diag_ubm(rng, 3, 2);
    const auto s = accumulate(ubm, random_matrix(rng, 20, 2, 2.0));
    const auto ml = ml_estimates(s, ubm);
    const auto sm = smoothed_estimates(s, ubm, {.gamma = 0.0});
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_NEAR(sm.weights[k], ml.weights[k], 1e-9);
      for (std::size_t d = 0; d < 2; ++d) {
        EXPECT_NEAR(sm.means(k, d), ml.means(k, d), 1e-9);
        EXPECT_NEAR(sm.variances(k, d), ml.variances(k, d), 1e-9);
      }
    }
  }
}

TEST(Smoothed, LargeGammaReturnsUbm) {
  SplitMix64 rng(7);
  const GmmModel ubm = random_diag_ubm(rng, 3, 2);
  const auto s = accumulate(ubm, random_matrix(rng, 30, 2, 2.0));
  const auto sm = smoothed_estimates(s, ubm, {.gamma = 1e12});
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(sm.weights[k], ubm.weights()[k], 1e-6);
    for (std::size_t d = 0; d < 2; ++d) {
      EXPECT_NEAR(sm.means(k, d), ubm.means()(k, d), 1e-6);
      EXPECT_NEAR(sm.variances(k, d), ubm.variance(k, d), 1e-6);
    }
  }
}

TEST(Smoothed, LambdaMidpoint) {
  const auto sm = smoothed_estimates(manual_stats({1.0, 0.0}, {2.0, 0.0}, {4.0, 0.0}),
                                     ubm_1d(0.0, 3.0, 1.0), {.gamma = 1.0});
  EXPECT_EQ(sm.means(0, 0), 1.0);
  EXPECT_EQ(sm.means(1, 0), 3.0);  // n = 0
  EXPECT_EQ(sm.variances(1, 0), 1.0);
  double ws = 0.0;
  for (double w : sm.weights) ws += w;
  EXPECT_NEAR(ws, 1.0, 1e-15);
}

TEST(Smoothed, MeansAreConvexCombination) {
  SplitMix64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const GmmModel ubm = random_diag_ubm(rng, 3, 2);
    const auto s = accumulate(ubm, random_matrix(rng, 6, 2, 2.0));
    const auto ml = ml_estimates(s, ubm);
    const auto sm = smoothed_estimates(s, ubm, {.gamma = rng.uniform(0.0, 10.0)});
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t d = 0; d < 2; ++d) {
        const double lo = std::min(ml.means(k, d), ubm.means()(k, d));
        const double hi = std::max(ml.means(k, d), ubm.means()(k, d));
        EXPECT_GE(sm.means(k, d), lo - 1e-12);
        EXPECT_LE(sm.means(k, d), hi + 1e-12);
      }
    }
  }
}

TEST(SgmmCode, RowsAreSmoothedMeans) {
  SplitMix64 rng(9);
  const GmmModel ubm = random_diag_ubm(rng, 4, 3);
  const auto s = accumulate(ubm, random_matrix(rng, 9, 3));
  const auto code = sgmm_code(s, ubm, 0.5);
  const auto sm = smoothed_estimates(s, ubm, {.gamma = 0.5});
  EXPECT_EQ(code.values, sm.means);
}

TEST(SgmmCode, EmptyClusterGivesUbmMeanAndHardGammaZero) {
  const GmmModel ubm = separated_ubm();
  Matrix x(2, 1);
  x(0, 0) = 9.5;
  x(1, 0) = 10.7;
  const auto s = accumulate(ubm, x);
  const auto c = sgmm_code(s, ubm, 0.125);
  EXPECT_NEAR(c.values(0, 0), -10.0, 1e-12);
  const auto c0 = sgmm_code(s, ubm, 0.0);
  EXPECT_NEAR(c0.values(2, 0), 10.1, 1e-9);
}

TEST(VladCode, MatchesPerFrameResidualSum) {
  SplitMix64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const GmmModel ubm = random_diag_ubm(rng, 3, 4);
    const Matrix x = random_matrix(rng, 1 + trial % 13, 4, 2.0);
    // One accumulate call feeds both codes.
    const auto s = accumulate(ubm, x);
    const auto vlad = vlad_code(s, ubm);
    const auto sg = sgmm_code(s, ubm, 0.125);
    EXPECT_EQ(sg.values.rows(), vlad.values.rows());
    Matrix ref(3, 4);
    for (std::size_t t = 0; t < x.rows(); ++t) {
      const auto lp = ubm.log_posterior(x.row(t));
      for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t d = 0; d < 4; ++d) ref(k, d) += std::exp(lp[k]) * (x(t, d) - ubm.means()(k, d));
      }
    }
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(vlad.values.flat()[i], ref.flat()[i], 1e-10);
  }
}

TEST(VladCode, SingleFrameAndZeroResidual) {
  const GmmModel ubm = separated_ubm();
  const auto one = vlad_code(accumulate(ubm, Matrix(1, 1, 9.0)), ubm);
  EXPECT_NEAR(one.values(2, 0), -1.0, 1e-12);
  EXPECT_NEAR(one.values(0, 0), 0.0, 1e-12);
  Matrix sym(2, 1);
  sym(0, 0) = 9.0;
  sym(1, 0) = 11.0;
  EXPECT_NEAR(vlad_code(accumulate(ubm, sym), ubm).values(2, 0), 0.0, 1e-12);
}

TEST(BowCode, HistogramCases) {
  const GmmModel k1({1.0}, Matrix(1, 2), {CovKind::kDiagonal, Matrix(1, 2, 1.0)});
  SplitMix64 rng(11);
  const auto one = bow_code(accumulate(k1, random_matrix(rng, 5, 2)));
  EXPECT_EQ(one.values(0, 0), 1.0);
  // Identical centers give uniform posteriors.
  const GmmModel same({0.25, 0.25, 0.25, 0.25}, Matrix(4, 2), {CovKind::kSharedSpherical, Matrix(1, 1, 1.0)});
  const auto uni = bow_code(accumulate(same, random_matrix(rng, 5, 2)));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(uni.values(0, k), 0.25, 1e-15);
  // Counting oracle on the hard-assignment UBM.
  Matrix x(4, 1);
  x(0, 0) = -10;
  x(1, 0) = 10;
  x(2, 0) = 10.5;
  x(3, 0) = 0.2;
  const auto h = bow_code(accumulate(separated_ubm(), x));
  EXPECT_NEAR(h.values(0, 0), 0.25, 1e-12);
  EXPECT_NEAR(h.values(0, 1), 0.25, 1e-12);
  EXPECT_NEAR(h.values(0, 2), 0.5, 1e-12);
}

TEST(AvgPool, Cases) {
  Matrix one(1, 3);
  one(0, 0) = 1;
  one(0, 1) = -2;
  one(0, 2) = 3;
  EXPECT_EQ(avg_pool(one).values, one);
  Matrix pm(2, 3);
  for (std::size_t d = 0; d < 3; ++d) {
    pm(0, d) = one(0, d);
    pm(1, d) = -one(0, d);
  }
  const auto zero = avg_pool(pm);
  for (double v : zero.values.flat()) EXPECT_EQ(v, 0.0);
  SplitMix64 rng(12);
  const Matrix x = random_matrix(rng, 11, 5);
  const auto a = avg_pool(x);
  for (std::size_t d = 0; d < 5; ++d) {
    double s = 0.0;
    for (std::size_t t = 0; t < 11; ++t) s += x(t, d);
    EXPECT_NEAR(a.values(0, d), s / 11, 1e-14);
  }
}

TEST(Normalize, Cases) {
  VideoCode zero{Matrix(3, 2)};
  normalize(zero, true, true);
  for (double v : zero.values.flat()) EXPECT_EQ(v, 0.0);

  VideoCode tri{Matrix(1, 2)};
  tri.values(0, 0) = 3;
  tri.values(0, 1) = 4;
  normalize(tri, true, false);
  EXPECT_NEAR(tri.values(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(tri.values(0, 1), 0.8, 1e-15);
  EXPECT_TRUE(tri.intra_normed);
  EXPECT_FALSE(tri.final_normed);

  SplitMix64 rng(13);
  VideoCode c{random_matrix(rng, 5, 4)};
  c.values.row(2)[0] = c.values.row(2)[1] = c.values.row(2)[2] = c.values.row(2)[3] = 0.0;
  VideoCode intra_only = c;
  normalize(intra_only, true, false);
  for (std::size_t k = 0; k < 5; ++k) {
    double n2 = 0.0;
    for (double v : intra_only.values.row(k)) n2 += v * v;
    EXPECT_NEAR(n2, k == 2 ? 0.0 : 1.0, 1e-9);
  }
  normalize(c, true, true);
  double all = 0.0;
  for (double v : c.values.flat()) all += v * v;
  EXPECT_NEAR(all, 1.0, 1e-12);
  // Intra first, so the final scale is uniform across nonzero rows: 1/sqrt(4).
  for (std::size_t i = 0; i < c.values.size(); ++i)
    EXPECT_NEAR(c.values.flat()[i], intra_only.values.flat()[i] / 2.0, 1e-12);
}

TEST(Vcod, RoundTrip) {
  SplitMix64 rng(14);
  std::vector<CodeEntry> entries;
  for (int i = 0; i < 6; ++i) {
    CodeEntry e{"vid" + std::to_string(i), {}, Matrix(1 + i % 3, 4)};
    for (double& v : e.code.flat()) v = static_cast<float>(rng.normal());
    for (int l = 0; l < i % 3; ++l) e.labels.push_back(static_cast<std::uint32_t>(l * 3 + i));
    entries.push_back(e);
  }
  const auto path = (std::filesystem::temp_directory_path() / "sgmm_test_roundtrip.vcod").string();
  write_vcod(entries, path);
  EXPECT_EQ(read_vcod(path), entries);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".manifest");
}
