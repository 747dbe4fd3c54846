#include <gtest/gtest.h>

#include <cmath>

#include "tadt/errors.hpp"
#include "tadt/model.hpp"
#include "tadt/ops.hpp"
#include "tadt/router.hpp"

using namespace tadt;

namespace {

double logit(double p) { return std::log(p / (1 - p)); }

// Scalar form of the modulation: min(beta * n * s_i / sum(s), 1).
std::vector<double> modulation_oracle(const std::vector<double>& sig, double beta) {
  double total = 0;
  for (double s : sig) total += s;
  std::vector<double> p;
  for (double s : sig) p.push_back(std::min(beta * sig.size() * s / total, 1.0));
  return p;
}

}  // namespace

TEST(Modulation, UniformLogitsGiveBetaExactly) {
  for (double e : {-3.0, 0.0, 0.7, 5.0}) {
    for (double beta : {0.1, 0.35, 0.6, 0.999}) {
      const auto p = modulate(Tensor<double>::full({8}, e), Tensor<double>({1}, {beta}));
      for (double v : p.data()) EXPECT_EQ(v, beta);
      const auto pf = modulate(Tensor<float>::full({8}, float(e)), Tensor<float>({1}, {float(beta)}));
      for (float v : pf.data()) EXPECT_EQ(v, float(beta));
    }
  }
}

TEST(Modulation, ClampExample) {
  const std::vector<double> sig{0.8, 0.1, 0.1, 0.1};
  std::vector<double> e;
  for (double s : sig) e.push_back(logit(s));
  const auto p = modulate(Tensor<double>({4}, e), Tensor<double>({1}, {0.6}));
  const auto ref = modulation_oracle(sig, 0.6);
  ASSERT_EQ(ref[0], 1.0);
  EXPECT_NEAR(ref[1], 0.2182, 1e-4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p.data()[i], ref[i], 1e-12);
}

TEST(Modulation, RandomLogitsMatchOracle) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> e(12), sig;
    for (auto& v : e) {
      v = rng.uniform(-4, 4);
      sig.push_back(1 / (1 + std::exp(-v)));
    }
    const double beta = rng.uniform(0.05, 0.95);
    const auto p = modulate(Tensor<double>({12}, e), Tensor<double>({1}, {beta}));
    const auto ref = modulation_oracle(sig, beta);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(p.data()[i], ref[i], 1e-12);
  }
}

TEST(Sampling, BernoulliMean) {
  Rng rng(2024);
  const std::size_t n = 100000;
  const auto routes = sample_routes(Tensor<double>::full({n}, 0.3), RoutingMode::sample, rng);
  EXPECT_NEAR(static_cast<double>(routes.bits.active_count()) / n, 0.3, 0.005);
}

TEST(Sampling, FixedSeedIsReproducible) {
  Rng a(9), b(9);
  const auto p = Tensor<double>::full({64}, 0.5);
  EXPECT_EQ(sample_routes(p, RoutingMode::sample, a).bits, sample_routes(p, RoutingMode::sample, b).bits);
}

TEST(Sampling, ThresholdAndAllOn) {
  Rng rng(0);
  const Tensor<double> p({4}, {0.49, 0.5, 0.9, 0.0});
  EXPECT_EQ(sample_routes(p, RoutingMode::threshold, rng).bits.to_string(), "0110");
  EXPECT_EQ(sample_routes(p, RoutingMode::all_on, rng).bits.to_string(), "1111");
  EXPECT_EQ(sample_routes(p, RoutingMode::threshold, rng, 0.95).bits.to_string(), "0000");
}

TEST(Sampling, ProbabilityOutsideUnitIntervalThrows) {
  Rng rng(0);
  EXPECT_THROW(sample_routes(Tensor<double>({4}, {0.1, 1.2, 0, 0}), RoutingMode::sample, rng), ContractError);
  EXPECT_THROW(sample_routes(Tensor<double>({3}, {0.1, 0.2, 0}), RoutingMode::sample, rng), DimensionError);
}

TEST(Sampling, StraightThroughGradientIsIdentity) {
  Rng rng(5);
  const Tensor<double> p({8}, {0.1, 0.9, 0.5, 0.3, 0.7, 0.2, 0.6, 0.4}, true);
  const Tensor<double> c({8}, {1.5, -2, 0.25, 3, -0.5, 7, 0, -1});
  for (RoutingMode mode : {RoutingMode::sample, RoutingMode::threshold}) {
    p.zero_grad();
    sum(mul(sample_routes(p, mode, rng).gates, c)).backward();
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(p.grad()[i], c.data()[i]);
  }
}

TEST(Controller, ShapesAndRanges) {
  BackboneConfig bc;
  bc.groups = 3;
  RouterConfig rcfg;
  rcfg.hidden = 4;
  rcfg.scale_hidden = 8;
  Rng rng(1);
  const auto rc = RoutingController<double>::create(bc, rcfg, rng);
  std::vector<double> px(3 * 9 * 7);
  for (auto& v : px) v = rng.uniform();
  const auto d = rc.forward(Tensor<double>({1, 3, 9, 7}, px), 2.5);
  EXPECT_EQ(d.logits.shape(), (Shape{12}));
  EXPECT_EQ(d.probs.shape(), (Shape{12}));
  EXPECT_GT(d.beta.item(), 0.0);
  EXPECT_LT(d.beta.item(), 1.0);
  for (double v : d.probs.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(rc.scale_branch(0.5), ContractError);
}

TEST(Controller, NormalizedScale) {
  EXPECT_DOUBLE_EQ(normalized_scale(1.0), 0.0);
  EXPECT_DOUBLE_EQ(normalized_scale(4.0), 1.0);
}

TEST(Network, BaselineRouteIsAllOnWithoutGates) {
  Rng rng(0);
  const auto net = Network<double>::create(tiny_config(), Stage::baseline, rng);
  const auto routed = net.route(Tensor<double>::zeros({1, 3, 8, 8}), 2.0, RoutingMode::sample, rng);
  EXPECT_EQ(routed.bits, RoutingVector::all_on(2));
  EXPECT_FALSE(routed.gates.defined());
  EXPECT_FALSE(routed.dist.has_value());
}
