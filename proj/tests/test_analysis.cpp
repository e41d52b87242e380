#include <gtest/gtest.h>

#include "support.hpp"

namespace ca = circuit_align;
namespace ts = testing_support;

namespace {

// Gaussian clusters around well separated centres.
void clusters(std::size_t n, std::size_t k, double spread, std::uint64_t seed, ca::Matrix& x, std::vector<long>& y) {
  ca::Rng rng(seed);
  x = ca::Matrix(n, 4);
  y.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<long>(i % k);
    for (std::size_t j = 0; j < 4; ++j) x(i, j) = spread * rng.normal() + (j == static_cast<std::size_t>(y[i]) ? 5.0 : 0.0);
  }
}

}  // namespace

TEST(Attribution, ReconstructsLogitDifference) {
  const auto m = ts::random_model(41, 3, 2, 4, 16);
  const auto t = ca::mlp_attribution(m, ts::numeral_dataset(m, 8));
  EXPECT_NEAR(t.reconstructed(), t.logit_diff, 1e-9 * std::max(1.0, std::abs(t.logit_diff)));
  EXPECT_EQ(t.mlp.size(), 3u);
  EXPECT_EQ(t.mlp_by_position.size(), 3u);
  // The final position column matches the per-layer totals.
  for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(t.mlp_by_position[l].back(), t.mlp[l], 1e-12);
}

TEST(Attribution, ZeroedMlpContributesNothing) {
  auto m = ts::random_model(42);
  for (auto& layer : m.weights.layers) {
    std::fill(layer.w_out.begin(), layer.w_out.end(), 0.0f);
    std::fill(layer.b_out.begin(), layer.b_out.end(), 0.0f);
  }
  const auto t = ca::mlp_attribution(m, ts::numeral_dataset(m, 4));
  for (double v : t.mlp) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(t.mlp_share(0), 0.0);
}

TEST(Attribution, PlantedSuccessorMlpDominates) {
  const auto m = ca::build_planted(ca::teacher_spec());
  const auto t = ca::mlp_attribution(m, ts::numeral_dataset(m, 20));
  EXPECT_GT(t.mlp_share(1), 0.9);
  EXPECT_NEAR(t.reconstructed(), t.logit_diff, 1e-6 * std::abs(t.logit_diff));
}

TEST(Probe, SeparableClustersAreDecoded) {
  ca::Matrix x;
  std::vector<long> y;
  clusters(900, 3, 0.5, 3, x, y);
  const auto r = ca::train_linear_probe(x, y);
  EXPECT_EQ(r.n_classes, 3u);
  EXPECT_FALSE(r.binary);
  EXPECT_NEAR(r.chance, 1.0 / 3.0, 1e-15);
  EXPECT_GE(r.score, 0.99);
  EXPECT_NEAR(r.permutation_score, r.chance, 0.1);
  EXPECT_EQ(r.n_train + r.n_val, 900u);
}

TEST(Probe, Deterministic) {
  ca::Matrix x;
  std::vector<long> y;
  clusters(200, 2, 3.0, 4, x, y);
  const auto a = ca::train_linear_probe(x, y);
  const auto b = ca::train_linear_probe(x, y);
  EXPECT_EQ(a.score, b.score);
  EXPECT_EQ(a.permutation_score, b.permutation_score);
  ca::ProbeOptions other;
  other.seed = 9;
  EXPECT_TRUE(a.binary);
  EXPECT_NE(ca::train_linear_probe(x, y, other).permutation_score, a.permutation_score);
}

TEST(Probe, NullLabelsStayNearChance) {
  ca::Rng rng(5);
  ca::Matrix x(2000, 6);
  std::vector<long> y(2000);
  for (std::size_t i = 0; i < 2000; ++i) {
    for (std::size_t j = 0; j < 6; ++j) x(i, j) = rng.normal();
    y[i] = static_cast<long>(rng.index(2));
  }
  const auto r = ca::train_linear_probe(x, y);
  EXPECT_LT(std::abs(r.score - 0.5), ca::chance_band(0.5, r.n_val));
  EXPECT_LT(std::abs(r.permutation_score - 0.5), ca::chance_band(0.5, r.n_val));
}

TEST(Probe, RejectsDegenerateInputs) {
  ca::Matrix x(4, 2);
  EXPECT_THROW(ca::train_linear_probe(x, {1, 1, 1, 1}), ca::Error);
  EXPECT_THROW(ca::train_linear_probe(x, {0, 1}), ca::Error);
  x(0, 0) = std::nan("");
  EXPECT_THROW(ca::train_linear_probe(x, {0, 1, 0, 1}), ca::Error);
}

TEST(Auroc, TiesCountHalf) {
  const std::vector<double> s = {1.0, 1.0, 2.0, 0.0};
  const std::vector<int> pos = {1, 0, 1, 0};
  EXPECT_EQ(ca::auroc(s, pos), 0.875);
  const std::vector<double> flat = {0.3, 0.3, 0.3, 0.3};
  EXPECT_EQ(ca::auroc(flat, pos), 0.5);
  const std::vector<int> none = {0, 0, 0, 0};
  EXPECT_THROW(ca::auroc(s, none), ca::Error);
}

TEST(ProbeCurve, PlantedCircuitComputesAnswerAtLayerOne) {
  const auto m = ca::build_planted(ca::teacher_spec());
  const auto ds = ts::numeral_dataset(m, 200);
  ca::ProbeSpec spec;
  spec.target = ca::ProbeTarget::next_numeral;
  const auto curve = ca::probe_layer_curve(m, ds, spec);
  ASSERT_EQ(curve.points.size(), 3u);
  for (const auto& p : curve.points) {
    EXPECT_GE(p.score, 0.0);
    EXPECT_LE(p.score, 1.0);
  }
  EXPECT_GT(curve.points[1].score - curve.points[0].score, 0.3);
  EXPECT_GE(curve.points[2].score, 0.9);
}

TEST(ProbeCurve, HeadValueSource) {
  const auto m = ca::build_planted(ca::teacher_spec());
  const auto ds = ts::numeral_dataset(m, 120);
  ca::ProbeSpec spec;
  spec.source = ca::ProbeSource::head_values;
  spec.head = ca::ComponentId::attn(1, 0);
  spec.target = ca::ProbeTarget::previous_numeral;
  const auto curve = ca::probe_layer_curve(m, ds, spec);
  ASSERT_EQ(curve.layers, (std::vector<std::size_t>{1}));
  spec.head = ca::ComponentId::attn(7, 0);
  EXPECT_THROW(ca::probe_layer_curve(m, ds, spec), ca::Error);
}

TEST(SuccessorCopy, BoundsAndArguments) {
  const auto m = ca::build_planted(ca::teacher_spec());
  const auto ds = ts::numeral_dataset(m, 10);
  const auto s = ca::successor_copy_scores(m, ds, ca::ComponentId::attn(1, 0));
  EXPECT_EQ(s.n, 10u);
  EXPECT_GE(s.successor_pct, 0.0);
  EXPECT_LE(s.successor_pct, 100.0);
  EXPECT_GE(s.copy_pct, 0.0);
  EXPECT_LE(s.copy_pct, 100.0);
  EXPECT_THROW(ca::successor_copy_scores(m, ds, ca::ComponentId::mlp(1)), ca::Error);
}

TEST(MlpSimilarity, SelfDiagonalIsOne) {
  const auto m = ca::build_planted(ca::teacher_spec());
  const auto s = ca::summarize_components(m, ts::numeral_dataset(m, 20), ca::HeadSite::head_out);
  const auto sim = ca::mlp_similarity_matrix(s, s);
  ASSERT_EQ(sim.teacher.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& basis = s.at(sim.teacher[i]).basis;
    if (basis.rank == 0) continue;
    EXPECT_NEAR(sim.values(i, i), 1.0, 1e-9) << ca::to_string(sim.teacher[i]);
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_GE(sim.values(i, j), 0.0);
      EXPECT_LE(sim.values(i, j), 1.0 + 1e-12);
    }
  }
}
