#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "tadt/attention.hpp"
#include "tadt/errors.hpp"
#include "tadt/ops.hpp"
#include "tadt/rng.hpp"

using namespace tadt;

namespace {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool grad = false) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return Tensor<T>(std::move(shape), std::move(v), grad);
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Matmul, SmallExample) {
  const Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor<double> b({3, 2}, {7, 8, 9, 10, 11, 12});
  EXPECT_EQ(values(matmul(a, b)), (std::vector<double>{58, 64, 139, 154}));
}

TEST(Matmul, BatchedMatchesNaiveLoop) {
  Rng rng(1);
  const auto a = random_tensor({3, 17, 9}, rng);
  const auto b = random_tensor({3, 9, 13}, rng);
  const auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 17, 13}));
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t i = 0; i < 17; ++i)
      for (std::size_t j = 0; j < 13; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 9; ++k) s += a.data()[g * 153 + i * 9 + k] * b.data()[g * 117 + k * 13 + j];
        EXPECT_NEAR(c.data()[g * 221 + i * 13 + j], s, 1e-12);
      }
}

TEST(Matmul, TransposedRightOperand) {
  Rng rng(2);
  const auto a = random_tensor({2, 5, 4}, rng);
  const auto b = random_tensor({2, 6, 4}, rng);
  const auto c = matmul_nt(a, b);
  const auto ref = matmul(a, permute(b, {0, 2, 1}));
  EXPECT_EQ(values(c), values(ref));
}

TEST(Matmul, EveryRemainderShapeMatchesSequentialSumBitwise) {
  Rng rng(3);
  for (std::size_t m : {1, 3, 4, 5, 9}) {
    for (std::size_t n : {1, 3, 8, 9, 15, 16, 17, 24, 33}) {
      for (std::size_t k : {1, 6}) {
        const auto a = random_tensor<float>({m, k}, rng);
        const auto b = random_tensor<float>({k, n}, rng);
        const auto c = matmul(a, b);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            float s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a.data()[i * k + p] * b.data()[p * n + j];
            ASSERT_EQ(c.data()[i * n + j], s) << m << "x" << k << "x" << n;
          }
        }
      }
    }
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2, 3})), DimensionError);
}

TEST(Conv2d, MatchesDirectSum) {
  Rng rng(3);
  const auto x = random_tensor({2, 3, 5, 6}, rng);
  const auto w = random_tensor({4, 3, 3, 3}, rng);
  const auto b = random_tensor({4}, rng);
  const auto y = conv2d(x, w, b, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 5, 6}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j) {
          double s = b.data()[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (int di = -1; di <= 1; ++di)
              for (int dj = -1; dj <= 1; ++dj) {
                const int yi = i + di, xj = j + dj;
                if (yi < 0 || yi >= 5 || xj < 0 || xj >= 6) continue;
                s += x.data()[((n * 3 + c) * 5 + yi) * 6 + xj] * w.data()[((o * 3 + c) * 3 + di + 1) * 3 + dj + 1];
              }
          EXPECT_NEAR(y.data()[((n * 4 + o) * 5 + i) * 6 + j], s, 1e-12);
        }
}

TEST(Conv2d, OnesKernelCountsNeighbours) {
  const auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  const auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  EXPECT_EQ(values(conv2d(x, w, Tensor<double>{}, 1)), (std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST(Softmax, KnownValues) {
  const Tensor<double> x({3}, {1, 2, 3});
  const auto y = softmax(x, 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y.data()[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(y.data()[1], std::exp(2.0) / z, 1e-15);
  EXPECT_NEAR(y.data()[2], std::exp(3.0) / z, 1e-15);
}

TEST(Softmax, LargeLogitsStayFinite) {
  const Tensor<double> x({2}, {1000, 1000});
  const auto y = softmax(x, 0);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.5);
}

TEST(LayerNorm, MatchesDirectFormula) {
  const Tensor<double> x({2, 4}, {1, 2, 3, 4, -1, 0, 5, 2});
  const Tensor<double> g({4}, {1, 2, 0.5, 1});
  const Tensor<double> b({4}, {0, 1, 0, -1});
  const auto y = layer_norm(x, g, b);
  for (std::size_t r = 0; r < 2; ++r) {
    double mu = 0, var = 0;
    for (std::size_t i = 0; i < 4; ++i) mu += x.data()[r * 4 + i] / 4;
    for (std::size_t i = 0; i < 4; ++i) var += std::pow(x.data()[r * 4 + i] - mu, 2) / 4;
    for (std::size_t i = 0; i < 4; ++i) {
      const double ref = (x.data()[r * 4 + i] - mu) / std::sqrt(var + 1e-5) * g.data()[i] + b.data()[i];
      EXPECT_NEAR(y.data()[r * 4 + i], ref, 1e-12);
    }
  }
}

TEST(Layout, SplitThenConcatIsIdentity) {
  Rng rng(4);
  const auto x = random_tensor({2, 3, 8}, rng);
  const auto parts = split(x, {2, 2, 4}, 2);
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(parts[2].shape(), (Shape{2, 3, 4}));
  EXPECT_EQ(values(concat(parts, 2)), values(x));
}

TEST(Layout, PadThenCropIsIdentity) {
  Rng rng(5);
  const auto x = random_tensor({1, 3, 4, 2}, rng);
  const auto p = pad(x, {{0, 0}, {1, 2}, {0, 3}, {0, 0}});
  EXPECT_EQ(p.shape(), (Shape{1, 6, 7, 2}));
  EXPECT_EQ(values(crop(p, {0, 1, 0, 0}, {1, 3, 4, 2})), values(x));
}

TEST(Layout, GatherNegativeIndexGivesZero) {
  const Tensor<double> x({3}, {5, 6, 7});
  EXPECT_EQ(values(gather(x, {4}, {2, -1, 0, 2})), (std::vector<double>{7, 0, 5, 7}));
}

TEST(Pool, MaxAndAverage) {
  const Tensor<double> x({1, 1, 2, 4}, {1, 5, 2, 2, 3, 0, 8, 1});
  EXPECT_EQ(values(pool2d(x, PoolKind::max, 2, 2)), (std::vector<double>{5, 8}));
  EXPECT_EQ(values(pool2d(x, PoolKind::avg, 2, 2)), (std::vector<double>{2.25, 3.25}));
}

TEST(Autodiff, SquareSumGradient) {
  const Tensor<double> x({3}, {1, -2, 0.5}, true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, -4, 1}));
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  const Tensor<double> x({2}, {1.5, -1}, true);
  const auto a = scale(x, 3.0);
  // d/dx sum(a + a * x) = 3 + 6x
  sum(add(a, mul(a, x))).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3 + 6 * 1.5);
  EXPECT_DOUBLE_EQ(x.grad()[1], 3 - 6);
}

TEST(Autodiff, LeafGradientsAccumulateUntilZeroed) {
  const Tensor<double> x({1}, {2}, true);
  sum(x).backward();
  sum(x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  const Tensor<double> x({1}, {2}, true);
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  EXPECT_THROW(sum(y).backward(), std::exception);
}

TEST(MacCounter, CountsMatmulAndConv) {
  Rng rng(6);
  MacCountScope scope;
  (void)matmul(random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng));
  EXPECT_EQ(scope.count(), 2u * 3 * 4 * 5);
  (void)conv2d(random_tensor({1, 2, 4, 4}, rng), random_tensor({3, 2, 3, 3}, rng), Tensor<double>{}, 1);
  EXPECT_EQ(scope.count(), 2u * 3 * 4 * 5 + 3u * 2 * 9 * 16);
}

TEST(Window, SingleWindowOf48) {
  Rng rng(7);
  const auto x = random_tensor({1, 48, 48, 4}, rng);
  const auto p = window_partition(x, 48);
  EXPECT_EQ(p.windows.shape(), (Shape{1, 2304, 4}));
  EXPECT_EQ(values(p.windows), values(x));
}

TEST(Window, PaddedPartitionMergeRoundTrip) {
  Rng rng(8);
  const auto x = random_tensor({2, 5, 7, 3}, rng);
  const auto p = window_partition(x, 4);
  EXPECT_EQ(p.windows.shape(), (Shape{2 * 2 * 2, 16, 3}));
  EXPECT_EQ(values(window_merge(p.windows, p.layout)), values(x));
  // Token (0,0) of the second window is pixel (0,4).
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p.windows.data()[16 * 3 + c], x.data()[4 * 3 + c]);
  // The last row of the first image's bottom windows is padding.
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p.windows.data()[2 * 48 + 15 * 3 + c], 0.0);
}
