#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"

namespace ca = circuit_align;

TEST(Softmax, UniformForEqualLogits) {
  const std::vector<double> logits = {0.0, 0.0, 0.0};
  for (double p : ca::softmax_with_temperature(logits, 1.0)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, HighTemperatureFlattens) {
  const std::vector<double> logits = {1.0, 0.0};
  for (double p : ca::softmax_with_temperature(logits, 1000.0)) EXPECT_NEAR(p, 0.5, 1e-3);
}

TEST(Softmax, MatchesLongDoubleDirectSum) {
  const std::vector<double> logits = {2.0, 1.0, 0.5};
  const auto got = ca::softmax_with_temperature(logits, 2.0);
  long double total = 0.0L;
  for (double f : logits) total += std::exp(static_cast<long double>(f) / 2.0L);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const long double want = std::exp(static_cast<long double>(logits[i]) / 2.0L) / total;
    EXPECT_NEAR(got[i], static_cast<double>(want), 1e-15);
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  const std::vector<double> logits = {1000.0, 999.0};
  const auto p = ca::softmax_with_temperature(logits, 1.0);
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(Softmax, RejectsBadTemperature) {
  const std::vector<double> logits = {1.0};
  EXPECT_THROW(ca::softmax_with_temperature(logits, 0.0), ca::Error);
  EXPECT_THROW(ca::softmax_with_temperature(logits, -1.0), ca::Error);
}

TEST(Kl, IdentityIsZero) {
  const std::vector<double> p = {0.5, 0.5};
  EXPECT_EQ(ca::kl_divergence(p, p), 0.0);
}

TEST(Kl, PointMassAgainstUniformIsLn2) {
  const std::vector<double> p = {1.0, 0.0}, q = {0.5, 0.5};
  EXPECT_NEAR(ca::kl_divergence(p, q), std::log(2.0), 1e-15);
}

TEST(Kl, MatchesDirectSum) {
  const std::vector<double> p = {0.7, 0.3}, q = {0.3, 0.7};
  const double want = 0.7 * std::log(0.7 / 0.3) + 0.3 * std::log(0.3 / 0.7);
  EXPECT_NEAR(ca::kl_divergence(p, q), want, 1e-12);
}

TEST(Kl, SupportViolationIsDomainError) {
  const std::vector<double> p = {0.5, 0.5}, q = {1.0, 0.0};
  try {
    ca::kl_divergence(p, q);
    FAIL();
  } catch (const ca::Error& e) {
    EXPECT_EQ(e.code(), ca::ErrorCode::domain_error);
  }
}

TEST(Cosine, HandValues) {
  const std::vector<double> u = {1, 2, 3};
  EXPECT_EQ(ca::cosine_similarity(u, u), 1.0);
  const std::vector<double> a = {1, 0}, b = {0, 1};
  EXPECT_EQ(ca::cosine_similarity(a, b), 0.0);
}

TEST(Cosine, MatchesLongDoubleOracle) {
  ca::Rng rng(11);
  std::vector<double> u(16), v(16);
  for (auto& x : u) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  long double dot = 0, uu = 0, vv = 0;
  for (int i = 0; i < 16; ++i) {
    dot += static_cast<long double>(u[i]) * v[i];
    uu += static_cast<long double>(u[i]) * u[i];
    vv += static_cast<long double>(v[i]) * v[i];
  }
  EXPECT_NEAR(ca::cosine_similarity(u, v), static_cast<double>(dot / std::sqrt(uu * vv)), 1e-12);
}

TEST(Cosine, ZeroVectorIsDegenerate) {
  const std::vector<double> z = {0, 0}, u = {1, 0};
  try {
    ca::cosine_similarity(z, u);
    FAIL();
  } catch (const ca::Error& e) {
    EXPECT_EQ(e.code(), ca::ErrorCode::degenerate_input);
  }
}

namespace {

// Power iteration with deflation on the sample covariance.
std::vector<std::vector<double>> power_iteration_pca(const ca::Matrix& x, std::size_t k) {
  const std::size_t n = x.rows, d = x.cols;
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += x(r, c) / static_cast<double>(n);
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        cov[i][j] += (x(r, i) - mean[i]) * (x(r, j) - mean[j]) / static_cast<double>(n - 1);
  std::vector<std::vector<double>> out;
  for (std::size_t comp = 0; comp < k; ++comp) {
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i);
    double lambda = 0.0;
    for (int it = 0; it < 20000; ++it) {
      std::vector<double> w(d, 0.0);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) w[i] += cov[i][j] * v[j];
      double norm = 0.0;
      for (double t : w) norm += t * t;
      norm = std::sqrt(norm);
      lambda = norm;
      for (std::size_t i = 0; i < d; ++i) w[i] /= norm;
      v = w;
    }
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i][j] -= lambda * v[i] * v[j];
    out.push_back(v);
  }
  return out;
}

}  // namespace

TEST(Pca, MatchesPowerIterationOracle) {
  const ca::Matrix x(6, 4, std::vector<double>{2.0, 0.1, -1.0, 0.5,  //
                                               -1.5, 0.4, 0.3, 1.2,  //
                                               0.7, -2.2, 0.9, -0.4,  //
                                               1.1, 1.9, -0.6, 0.2,  //
                                               -0.3, -0.8, 2.4, -1.7,  //
                                               0.9, 0.5, -1.1, 2.6});
  const auto basis = ca::pca_top3(x);
  const auto oracle = power_iteration_pca(x, 3);
  EXPECT_FALSE(basis.rank_deficient);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_GE(std::abs(ca::cosine_similarity(basis.components[k], oracle[k])), 1.0 - 1e-9) << "component " << k;
  }
  EXPECT_GE(basis.variances[0], basis.variances[1]);
  EXPECT_GE(basis.variances[1], basis.variances[2]);
}

TEST(Pca, SingleAxisIsRankDeficient) {
  ca::Matrix x(8, 4);
  for (std::size_t r = 0; r < 8; ++r) x(r, 2) = static_cast<double>(r) - 3.5;
  const auto basis = ca::pca_top3(x);
  EXPECT_EQ(basis.rank, 1u);
  EXPECT_TRUE(basis.rank_deficient);
  EXPECT_NEAR(std::abs(basis.components[0][2]), 1.0, 1e-12);
  EXPECT_EQ(basis.variances[1], 0.0);
  EXPECT_EQ(basis.variances[2], 0.0);
}

TEST(Pca, IsotropicSampleHasEqualVariances) {
  ca::Rng rng(5);
  ca::Matrix x(10000, 5);
  for (auto& v : x.data) v = rng.normal();
  const auto basis = ca::pca_top3(x);
  EXPECT_LT(basis.variances[0] / basis.variances[2], 1.05);
}

TEST(Pca, CanonicalSignIsDeterministic) {
  ca::Rng rng(3);
  ca::Matrix x(20, 6);
  for (auto& v : x.data) v = rng.normal();
  const auto a = ca::pca_top3(x);
  for (const auto& comp : a.components) {
    const auto it = std::max_element(comp.begin(), comp.end(), [](double p, double q) { return std::abs(p) < std::abs(q); });
    EXPECT_GT(*it, 0.0);
  }
}

TEST(Bootstrap, ConstantSample) {
  const std::vector<double> s(7, 2.5);
  const auto b = ca::bootstrap_ci(s, 500, 0.95, 1);
  EXPECT_EQ(b.mean, 2.5);
  EXPECT_EQ(b.ci_low, 2.5);
  EXPECT_EQ(b.ci_high, 2.5);
}

TEST(Bootstrap, MatchesIndependentPercentileOracle) {
  std::vector<double> s(10);
  std::iota(s.begin(), s.end(), 1.0);
  const std::uint64_t seed = 42;
  const auto got = ca::bootstrap_ci(s, 200, 0.95, seed);
  // Same resampling stream, percentile by linear interpolation between order statistics.
  std::mt19937_64 engine(seed);
  std::vector<double> means;
  for (int b = 0; b < 200; ++b) {
    double t = 0.0;
    for (int i = 0; i < 10; ++i) {
      const auto idx = static_cast<std::size_t>((static_cast<unsigned __int128>(engine()) * 10u) >> 64);
      t += s[idx];
    }
    means.push_back(t / 10.0);
  }
  std::sort(means.begin(), means.end());
  auto pct = [&](double q) {
    const double h = (means.size() - 1) * q;
    const auto lo = static_cast<std::size_t>(h);
    return means[lo] + (h - lo) * (means[std::min(lo + 1, means.size() - 1)] - means[lo]);
  };
  EXPECT_DOUBLE_EQ(got.mean, 5.5);
  EXPECT_NEAR(got.ci_low, pct(0.025), 1e-12);
  EXPECT_NEAR(got.ci_high, pct(0.975), 1e-12);
}

TEST(Bootstrap, DeterministicPerSeed) {
  const std::vector<double> s = {1.0, 4.0, 2.0, 8.0, 5.0};
  const auto a = ca::bootstrap_ci(s, 1000, 0.95, 9);
  const auto b = ca::bootstrap_ci(s, 1000, 0.95, 9);
  EXPECT_EQ(a.ci_low, b.ci_low);
  EXPECT_EQ(a.ci_high, b.ci_high);
}

TEST(Spearman, HandValues) {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> down = {9, 7, 4, 2, 1};
  EXPECT_NEAR(ca::spearman_rho(x, down), -1.0, 1e-15);
  const std::vector<double> ties = {1, 1, 2, 2, 3};
  // Ranks 1.5 1.5 3.5 3.5 5 against 1..5.
  const std::vector<double> rx = {1, 2, 3, 4, 5}, ry = {1.5, 1.5, 3.5, 3.5, 5};
  EXPECT_NEAR(ca::spearman_rho(x, ties), ca::pearson(rx, ry), 1e-15);
}

TEST(Quantile, LinearInterpolation) {
  const std::vector<double> s = {1.0, 2.0, 3.0, 4.0};
  EXPECT_DOUBLE_EQ(ca::sorted_quantile(s, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(ca::sorted_quantile(s, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(ca::sorted_quantile(s, 1.0), 4.0);
}
