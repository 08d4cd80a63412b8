#include <gtest/gtest.h>

#include "ndtsynth/gan_objective.hpp"
#include "test_support.hpp"

using namespace ndtsynth;
using namespace ndtsynth::gan;
using testing_support::TempDir;

namespace {

// `n` unit pixels (n <= 16) filling rows of a centered 4-wide block in a side x side zero image.
std::vector<double> footprint(std::size_t side, std::size_t n) {
  std::vector<double> sim(side * side, 0.0);
  const std::size_t off = (side - 4) / 2;
  for (std::size_t i = 0; i < n; ++i) sim[(i / 4 + off) * side + (i % 4) + off] = 1.0;
  return sim;
}

std::vector<double> with_error(const std::vector<double>& sim, double err) {
  auto g = sim;
  for (auto& v : g)
    if (v > 0.0) v -= err;
  return g;
}

}  // namespace

TEST(ActivationMap, ZeroImage) {
  const std::vector<double> z(16, 0.0);
  const auto m = activation_map(z);
  EXPECT_EQ(m.k, 0.0);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(ActivationMap, NormalizesByPeak) {
  std::vector<double> s(16, 0.0);
  for (int i : {0, 5, 10, 15}) s[i] = 0.5;
  const auto m = activation_map(s);
  EXPECT_EQ(m.k, 0.25);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(m.values[i], (i % 5 == 0) ? 1.0 : 0.0);
}

TEST(ActivationMap, UnitPeakIsIdentity) {
  const std::vector<double> s = {0.0, 0.2, 1.0, 0.7};
  EXPECT_EQ(activation_map(s).values, s);
  EXPECT_THROW(activation_map(std::vector<double>{0.2, 1.3}), DataError);
}

TEST(ActivmapLoss, ZeroWhenReproduced) {
  const auto s = footprint(8, 9);
  EXPECT_EQ(activmap_loss(s, s), 0.0);
}

TEST(ActivmapLoss, HandCases) {
  const auto four = hand_case(4), eight = hand_case(8);
  EXPECT_NEAR(activmap_loss(four.gen_out, four.sim), 0.5, 1e-12);
  EXPECT_NEAR(activmap_loss(eight.gen_out, eight.sim), 0.5, 1e-12);
  // Per-pixel term: 0.5 * 1 / 0.25 = 2, four of sixteen pixels.
  EXPECT_EQ(activmap_loss(four.gen_out, four.sim), 4 * (0.5 * 1.0 / 0.25) / 16);
}

TEST(ActivmapLoss, InvariantToDefectSize) {
  for (std::size_t side : {4u, 16u}) {
    std::vector<double> losses;
    for (std::size_t n : {4u, 8u, 16u}) {
      const auto s = footprint(side, n);
      losses.push_back(activmap_loss(with_error(s, 0.5), s));
    }
    // Each defect pixel contributes err * 1 / (n / N); the sum over n of them divided by N is err.
    for (double l : losses) EXPECT_NEAR(l, 0.5, 1e-12) << side;
  }
}

TEST(ActivmapLoss, BackgroundIsFree) {
  Rng rng(1);
  const auto s = footprint(8, 4);
  auto g = with_error(s, 0.3);
  const double base = activmap_loss(g, s);
  for (int trial = 0; trial < 20; ++trial) {
    for (std::size_t i = 0; i < g.size(); ++i)
      if (s[i] == 0.0) g[i] = rng.uniform();
    EXPECT_EQ(activmap_loss(g, s), base);
  }
}

TEST(ActivmapLoss, NonNegativeAndErrors) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s(25), g(25);
    for (auto& v : s) v = rng.uniform();
    for (auto& v : g) v = rng.uniform();
    EXPECT_GE(activmap_loss(g, s), 0.0);
  }
  EXPECT_THROW(activmap_loss(std::vector<double>(16, 0.1), std::vector<double>(16, 0.0)), DataError);
  EXPECT_THROW(activmap_loss(std::vector<double>(15, 0.1), std::vector<double>(16, 0.5)), DimensionError);
}

TEST(ActivmapLoss, BatchIsMeanOfImages) {
  const auto a = hand_case(4), b = hand_case(8);
  const std::vector<std::vector<double>> g = {a.gen_out, b.gen_out, a.sim}, s = {a.sim, b.sim, a.sim};
  EXPECT_NEAR(activmap_loss_batch(g, s), (0.5 + 0.5 + 0.0) / 3, 1e-15);
}

TEST(TotalLoss, ZeroParts) { EXPECT_EQ(total_generator_loss({}), 0.0); }

TEST(TotalLoss, AllOnesAtLambda100) {
  EXPECT_NEAR(total_generator_loss({1, 1, 1, 1, 1}, LossWeights::with_lambda(100)), 301.0, 1e-12);
  EXPECT_NEAR(total_generator_loss({1, 1, 1, 1, 1}), 301.0, 1e-12);
}

TEST(TotalLoss, LinearInEachPart) {
  Rng rng(3);
  const LossWeights w;
  const double coef[5] = {2.0 / 3.0, 1.0 / 3.0, 100.0 * 2.0 / 3.0, 100.0 * 1.0 / 3.0, 200.0};
  for (int t = 0; t < 20; ++t) {
    const LossParts p{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    const double base = total_generator_loss(p, w);
    for (int k = 0; k < 5; ++k) {
      LossParts q = p;
      double* fields[5] = {&q.gan_exp, &q.gan_sim, &q.cyc_sim, &q.cyc_exp, &q.activ};
      const double delta = rng.uniform(0.1, 2.0);
      *fields[k] += delta;
      EXPECT_NEAR(total_generator_loss(q, w) - base, coef[k] * delta, 1e-12) << k;
    }
  }
  EXPECT_NEAR(total_generator_loss({2, 0, 0, 0, 0}) - total_generator_loss({1, 0, 0, 0, 0}), 2.0 / 3.0, 1e-15);
  EXPECT_THROW(total_generator_loss({-1, 0, 0, 0, 0}), DataError);
  LossWeights bad;
  bad.w_activ = -1;
  EXPECT_THROW(total_generator_loss({}, bad), ConfigError);
}

TEST(GoldenVectors, RoundTripAndDeterminism) {
  TempDir tmp("golden");
  Rng a(42), b(42);
  emit_golden_vectors(tmp / "a.json", 10, a);
  emit_golden_vectors(tmp / "b.json", 10, b);
  EXPECT_EQ(io::read_file(tmp / "a.json"), io::read_file(tmp / "b.json"));

  const auto cases = load_golden_vectors(tmp / "a.json");
  ASSERT_EQ(cases.size(), 12u);
  EXPECT_EQ(cases[0].name, "hand-4px");
  EXPECT_EQ(cases[1].name, "hand-8px");
  EXPECT_EQ(cases[0].expected_activ_loss, 0.5);
  EXPECT_EQ(cases[1].expected_activ_loss, 0.5);
  for (const auto& c : cases) {
    EXPECT_NEAR(activmap_loss(c.gen_out, c.sim), c.expected_activ_loss, 1e-9) << c.name;
    EXPECT_NEAR(total_generator_loss(c.parts, c.weights), c.expected_total, 1e-9) << c.name;
    EXPECT_EQ(c.expected_total, round12(c.expected_total));
  }
  const auto j = io::read_json(tmp / "a.json");
  for (const char* key : {"shape", "sim", "gen_out", "expected_activ_loss", "parts", "weights", "expected_total"})
    EXPECT_TRUE(j.at("cases").at(0).contains(key)) << key;
}

TEST(GoldenVectors, MalformedFiles) {
  TempDir tmp("golden");
  io::write_text(tmp / "empty.json", R"({"cases": []})");
  EXPECT_THROW(load_golden_vectors(tmp / "empty.json"), DataError);
  io::write_text(tmp / "bad.json", R"({"cases": [{"name": "x"}]})");
  EXPECT_THROW(load_golden_vectors(tmp / "bad.json"), DecodeError);
}
