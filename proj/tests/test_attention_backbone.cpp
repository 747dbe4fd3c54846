#include <gtest/gtest.h>

#include <cmath>

#include "tadt/errors.hpp"
#include "tadt/backbone.hpp"
#include "tadt/model.hpp"
#include "tadt/ops.hpp"
#include "tadt/upsampler.hpp"

using namespace tadt;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool grad = false) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return Tensor<T>(std::move(shape), std::move(v), grad);
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

BackboneConfig small_backbone(std::size_t groups = 2, std::size_t channels = 16) {
  BackboneConfig c;
  c.groups = groups;
  c.channels = channels;
  c.local_windows = {2, 4, 8};
  c.global_window = 8;
  c.pool_size = 4;
  c.heads = 2;
  c.out_channels = 8;
  return c;
}

RoutingVector random_routing(std::size_t groups, Rng& rng) {
  std::vector<int> bits(4 * groups);
  for (auto& b : bits) b = rng.bernoulli(0.5) ? 1 : 0;
  return RoutingVector(bits);
}

// Sum over j of O_j W_j with inactive blocks replaced by zeros, one
// sequential accumulation per output.
template <typename T>
std::vector<T> dense_projection_oracle(const std::array<Tensor<T>, 4>& full, const Tensor<T>& w,
                                       const std::array<bool, 4>& r, std::size_t rows, std::size_t c4) {
  const std::size_t c = 4 * c4;
  std::vector<T> out(rows * c);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t o = 0; o < c; ++o) {
      T s = 0;
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t j = k / c4;
        const T x = r[j] ? full[j].data()[i * c4 + k % c4] : T(0);
        s += x * w.data()[k * c + o];
      }
      out[i * c + o] = s;
    }
  }
  return out;
}

template <typename T>
void check_projection_equivalence(std::uint64_t seed, bool bitwise) {
  Rng rng(seed);
  const std::size_t h = 8, w = 8, c = 16, c4 = 4;
  for (int trial = 0; trial < 100; ++trial) {
    std::array<bool, 4> r{};
    for (auto& b : r) b = rng.bernoulli(0.5);
    if (trial == 0) r = {true, true, true, true};
    std::array<Tensor<T>, 4> full, blocks;
    for (std::size_t j = 0; j < 4; ++j) {
      full[j] = random_tensor<T>({1, h, w, c4}, rng);
      if (r[j]) blocks[j] = full[j];
    }
    const auto weight = random_tensor<T>({c, c}, rng);
    const auto got = sliceable_projection(blocks, weight, r);
    const bool any = r[0] || r[1] || r[2] || r[3];
    if (!any) {
      EXPECT_FALSE(got.defined());
      continue;
    }
    ASSERT_EQ(got.numel(), h * w * c);
    const auto ref = dense_projection_oracle(full, weight, r, h * w, c4);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (bitwise) {
        ASSERT_EQ(got.data()[i], ref[i]) << "trial " << trial;
      } else {
        ASSERT_NEAR(got.data()[i], ref[i], 1e-5) << "trial " << trial;
      }
    }
  }
}

}  // namespace

TEST(Attention, SingleHeadMatchesNaive) {
  Rng rng(1);
  const auto q = random_tensor<double>({1, 5, 4}, rng);
  const auto k = random_tensor<double>({1, 3, 4}, rng);
  const auto v = random_tensor<double>({1, 3, 4}, rng);
  const auto out = scaled_dot_attention(q, k, v, 1).output;
  for (std::size_t i = 0; i < 5; ++i) {
    double logits[3], z = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      logits[j] = 0;
      for (std::size_t d = 0; d < 4; ++d) logits[j] += q.data()[i * 4 + d] * k.data()[j * 4 + d];
      logits[j] = std::exp(logits[j] / 2.0);
      z += logits[j];
    }
    for (std::size_t d = 0; d < 4; ++d) {
      double s = 0;
      for (std::size_t j = 0; j < 3; ++j) s += logits[j] / z * v.data()[j * 4 + d];
      EXPECT_NEAR(out.data()[i * 4 + d], s, 1e-12);
    }
  }
}

TEST(Attention, HeadsSplitChannels) {
  Rng rng(2);
  const auto q = random_tensor<double>({2, 6, 4}, rng);
  const auto k = random_tensor<double>({2, 6, 4}, rng);
  const auto v = random_tensor<double>({2, 6, 4}, rng);
  const auto two = scaled_dot_attention(q, k, v, 2);
  EXPECT_EQ(two.weights.shape(), (Shape{2, 2, 6, 6}));
  for (std::size_t hd = 0; hd < 2; ++hd) {
    const auto one = scaled_dot_attention(slice(q, 2, 2 * hd, 2), slice(k, 2, 2 * hd, 2), slice(v, 2, 2 * hd, 2), 1);
    const auto part = slice(two.output, 2, 2 * hd, 2);
    for (std::size_t i = 0; i < part.numel(); ++i) EXPECT_NEAR(part.data()[i], one.output.data()[i], 1e-14);
  }
}

TEST(Attention, GsaReducesKeysToPoolGrid) {
  Rng rng(3);
  const auto windows = random_tensor<double>({2, 64, 3}, rng);
  const auto reduced = reduce_window_tokens(windows, 8, 4, GsaReduction::max_pool);
  ASSERT_EQ(reduced.shape(), (Shape{2, 16, 3}));
  // Reduced token (0,0) of window 0 is the max over the top-left 2x2 pixels.
  for (std::size_t c = 0; c < 3; ++c) {
    double m = -1e9;
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) m = std::max(m, windows.data()[(y * 8 + x) * 3 + c]);
    EXPECT_EQ(reduced.data()[c], m);
  }
}

TEST(Attention, LocalBranchPreservesShape) {
  Rng rng(4);
  const auto branch = AttentionBranch<double>::make_local(4, 4, 2, true, rng);
  const auto f = random_tensor<double>({1, 6, 9, 4}, rng);
  EXPECT_EQ(branch.forward(f).shape(), (Shape{1, 6, 9, 4}));
}

TEST(Projection, SlicedEqualsDenseOracleF64Bitwise) { check_projection_equivalence<double>(10, true); }

TEST(Projection, SlicedEqualsDenseOracleF32) { check_projection_equivalence<float>(11, false); }

TEST(Routing, ParseAndPrint) {
  const auto r = RoutingVector::parse("1010, 1111");
  EXPECT_EQ(r.size(), 8u);
  EXPECT_EQ(r.active_count(), 6u);
  EXPECT_TRUE(r.active(0, 0));
  EXPECT_FALSE(r.active(0, 1));
  EXPECT_EQ(RoutingVector::parse(r.to_string()), r);
  EXPECT_THROW(RoutingVector(std::vector<int>{1, 0, 2, 1}), ContractError);
  EXPECT_THROW(RoutingVector(std::vector<int>{1, 0, 1}), ContractError);
}

TEST(Backbone, GatedForwardEqualsDenseWithZeroedBranchesF64) {
  Rng rng(20);
  const auto cfg = small_backbone();
  const auto net = Backbone<double>::create(cfg, rng);
  const auto image = random_tensor<double>({1, 3, 16, 16}, rng);
  for (int trial = 0; trial < 6; ++trial) {
    const RoutingVector r = trial == 0 ? RoutingVector::all_off(2) : random_routing(2, rng);
    const auto sliced = net.forward(image, r, {}, ExecMode::sliced);
    const auto dense = net.forward(image, r, {}, ExecMode::dense_reference);
    EXPECT_TRUE(bitwise_equal(sliced, dense)) << r.to_string();
  }
}

TEST(Backbone, AllOnEqualsBaselineExactly) {
  Rng rng(21);
  const auto net = Backbone<double>::create(small_backbone(), rng);
  const auto image = random_tensor<double>({1, 3, 16, 16}, rng);
  EXPECT_TRUE(bitwise_equal(net.forward(image, RoutingVector::all_on(2)), net.forward_baseline(image)));
}

TEST(Backbone, UnityGatesEqualUngated) {
  Rng rng(22);
  const auto net = Backbone<double>::create(small_backbone(), rng);
  const auto image = random_tensor<double>({1, 3, 12, 12}, rng);
  const RoutingVector r = RoutingVector::parse("1011 0110");
  std::vector<double> g(r.bits().begin(), r.bits().end());
  const Tensor<double> gates({8}, g, true);
  EXPECT_TRUE(bitwise_equal(net.forward(image, r, gates), net.forward(image, r)));
}

TEST(Backbone, GatedOffBranchesGetNoGradient) {
  Rng rng(23);
  const auto net = Backbone<double>::create(small_backbone(), rng);
  const auto image = random_tensor<double>({1, 3, 10, 10}, rng);
  const RoutingVector r = RoutingVector::parse("1010 0001");
  sum(net.forward(image, r)).backward();
  ParamList<double> params;
  net.collect(params, "backbone");
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = 0; j < 4; ++j) {
        ParamList<double> branch;
        net.groups[g].blocks[b].branches[j].collect(branch, "x");
        for (const auto& p : branch) {
          if (r.active(g, j)) {
            EXPECT_TRUE(p.tensor.has_grad());
          } else {
            for (double v : p.tensor.grad()) EXPECT_EQ(v, 0.0);
          }
        }
      }
}

TEST(Backbone, OutputShapeOnNonMultipleInput) {
  Rng rng(24);
  const auto net = Backbone<double>::create(small_backbone(1), rng);
  const auto out = net.forward(random_tensor<double>({1, 3, 7, 11}, rng), RoutingVector::all_on(1));
  EXPECT_EQ(out.shape(), (Shape{1, 8, 7, 11}));
}

TEST(ParamCount, TinyClosedForm) {
  auto cfg = small_backbone(1, 8);
  // Hand count for N=1, C=8, C/4=2, MLP 16, C_out=8:
  // block = norm1 16 + qkv 4*2*6 + proj 64 + norm2 16 + fc1 144 + fc2 136 = 424
  // group = 2*424 + conv 584; shallow 224, body 584, head 584.
  EXPECT_EQ(param_count(cfg), 224u + 2 * 424 + 584 + 584 + 584);
  Rng rng(0);
  const auto net = Backbone<float>::create(cfg, rng);
  ParamList<float> params;
  net.collect(params, "b");
  EXPECT_EQ(count_scalars(params), param_count(cfg));
}

TEST(ParamCount, MatchesCollectedParametersAcrossToggles) {
  for (bool gsa : {true, false})
    for (bool rel : {true, false}) {
      auto cfg = small_backbone(2, 16);
      cfg.gsa_enabled = gsa;
      cfg.relative_bias = rel;
      Rng rng(1);
      const auto net = Backbone<float>::create(cfg, rng);
      ParamList<float> params;
      net.collect(params, "b");
      EXPECT_EQ(count_scalars(params), param_count(cfg));
    }
}

TEST(ParamCount, FullConfigurationNearPublishedSize) {
  RunConfig cfg;
  Rng rng(0);
  const auto base = Network<float>::create(cfg, Stage::baseline, rng);
  const std::size_t n = count_scalars(base.parameters());
  EXPECT_GE(n, 8'250'000u);
  EXPECT_LE(n, 10'100'000u);
  Rng rng2(0);
  const auto full = Network<float>::create(cfg, Stage::tadt, rng2);
  EXPECT_LT(count_scalars(full.parameters()) - n, 50'000u);
}
