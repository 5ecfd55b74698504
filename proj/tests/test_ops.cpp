#include "gradcheck.hpp"
#include "oracles.hpp"

#include <neuflow/neuflow.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace neuflow;

namespace {

struct ConvCase {
  int c_in, c_out, h, w, k, stride, pad;
};

class ConvAgainstOracle : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvAgainstOracle, MatchesDirectLoops) {
  const auto p = GetParam();
  std::mt19937_64 rng(p.k * 100 + p.stride);
  const auto x = oracle::random_tensor<double>(rng, p.c_in, p.h, p.w);
  const auto wt = oracle::random_tensor<double>(rng, p.c_out, p.c_in, p.k * p.k);
  const auto b = oracle::random_tensor<double>(rng, p.c_out, 1, 1);
  const auto got = conv2d(constant(x), constant(wt), constant(b), ConvGeometry{p.k, p.stride, p.pad}).value();
  const auto want = oracle::conv2d(x, wt, b, p.k, p.stride, p.pad);
  ASSERT_EQ(got.shape(), want.shape());
  EXPECT_LT(max_abs_diff(got, want), 1e-10);
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvAgainstOracle,
                         ::testing::Values(ConvCase{3, 4, 9, 7, 3, 1, 1}, ConvCase{2, 3, 8, 8, 4, 2, 1},
                                           ConvCase{5, 2, 6, 6, 1, 1, 0}, ConvCase{3, 2, 32, 16, 16, 8, 4},
                                           ConvCase{3, 2, 16, 16, 8, 4, 2}));

TEST(Conv, ConstantInputGivesConstantOutput) {
  std::mt19937_64 rng(1);
  const Tensor<double> x(3, 12, 10, 0.7);
  const auto wt = oracle::random_tensor<double>(rng, 4, 3, 9);
  const auto b = oracle::random_tensor<double>(rng, 4, 1, 1);
  const auto y = conv2d(constant(x), constant(wt), constant(b), ConvGeometry{3, 1, 1}).value();
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < y.height() * y.width(); ++i) EXPECT_NEAR(y.channel(c)[i], y.channel(c)[0], 1e-12);
}

TEST(Conv, RejectsMismatchedWeights) {
  const Tensor<double> x(3, 8, 8), w(2, 4, 9), b(2, 1, 1);
  EXPECT_THROW(conv2d(constant(x), constant(w), constant(b), ConvGeometry{3, 1, 1}), ShapeError);
}

TEST(Norm, GroupNormStatistics) {
  std::mt19937_64 rng(2);
  const auto x = oracle::random_tensor<double>(rng, 8, 5, 6, -3.0, 5.0);
  const Tensor<double> gamma(8, 1, 1, 1.0), beta(8, 1, 1, 0.0);
  const auto y = group_norm(constant(x), constant(gamma), constant(beta), 4).value();
  for (int g = 0; g < 4; ++g) {
    double mean = 0, sq = 0;
    const int n = 2 * 30;
    for (int c = 2 * g; c < 2 * g + 2; ++c)
      for (int i = 0; i < 30; ++i) mean += y.channel(c)[i];
    mean /= n;
    for (int c = 2 * g; c < 2 * g + 2; ++c)
      for (int i = 0; i < 30; ++i) sq += (y.channel(c)[i] - mean) * (y.channel(c)[i] - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / n, 1.0, 1e-3);
  }
}

TEST(Norm, LayerNormPerPixel) {
  std::mt19937_64 rng(3);
  const auto x = oracle::random_tensor<double>(rng, 6, 4, 4, -2.0, 2.0);
  const Tensor<double> gamma(6, 1, 1, 2.0), beta(6, 1, 1, 1.0);
  const auto y = layer_norm(constant(x), constant(gamma), constant(beta)).value();
  for (int p = 0; p < 16; ++p) {
    double mean = 0;
    for (int c = 0; c < 6; ++c) mean += y.channel(c)[p];
    EXPECT_NEAR(mean / 6, 1.0, 1e-12);
  }
}

TEST(Norm, GroupsAreLargestDivisorUpToLimit) {
  EXPECT_EQ(norm_groups_for(24, 8), 8);
  EXPECT_EQ(norm_groups_for(90, 8), 6);
  EXPECT_EQ(norm_groups_for(7, 8), 7);
  EXPECT_EQ(norm_groups_for(11, 8), 1);
}

TEST(Resize, ConstantFieldIsScaled) {
  const Tensor<double> x(2, 5, 7, 1.5);
  const auto y = resize_bilinear(x, 10, 14, 2.0);
  for (double v : y.storage()) EXPECT_DOUBLE_EQ(v, 3.0);
}

TEST(Resize, LinearRampStaysLinear) {
  Tensor<double> x(1, 1, 8);
  for (int i = 0; i < 8; ++i) x(0, 0, i) = i;
  const auto y = resize_bilinear(x, 1, 16);
  // Interior half-pixel centres map to (o + 0.5) / 2 - 0.5.
  for (int o = 1; o < 15; ++o) EXPECT_NEAR(y(0, 0, o), (o + 0.5) / 2 - 0.5, 1e-12);
}

// Warp

TEST(Warp, ZeroFlowIsBitExactIdentity) {
  std::mt19937_64 rng(4);
  const auto f = oracle::random_tensor<float>(rng, 5, 9, 11);
  const auto out = warp(constant(f), constant(Tensor<float>(2, 9, 11))).value();
  EXPECT_TRUE(out == f);
}

TEST(Warp, IntegerShiftReadsNeighbourAndZeroFills) {
  std::mt19937_64 rng(5);
  const auto f = oracle::random_tensor<double>(rng, 3, 6, 8);
  Tensor<double> flow(2, 6, 8);
  for (int i = 0; i < 48; ++i) flow.channel(0)[i] = 1.0;
  const auto out = warp(constant(f), constant(flow)).value();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 6; ++y) {
      for (int x = 0; x < 7; ++x) EXPECT_NEAR(out(c, y, x), f(c, y, x + 1), 1e-6);
      EXPECT_EQ(out(c, y, 7), 0.0);
    }
}

TEST(Warp, HalfPixelOnLinearRamp) {
  Tensor<double> f(1, 4, 10);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 10; ++x) f(0, y, x) = x;
  Tensor<double> flow(2, 4, 10);
  for (int i = 0; i < 40; ++i) flow.channel(0)[i] = 0.5;
  const auto out = warp(constant(f), constant(flow)).value();
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 9; ++x) EXPECT_NEAR(out(0, y, x), x + 0.5, 1e-6);
}

TEST(Warp, MatchesBilinearOracle) {
  std::mt19937_64 rng(6);
  const auto f = oracle::random_tensor<double>(rng, 4, 7, 9);
  const auto flow = oracle::random_tensor<double>(rng, 2, 7, 9, -3.0, 3.0);
  const auto out = warp(constant(f), constant(flow)).value();
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 9; ++x)
        EXPECT_NEAR(out(c, y, x), oracle::sample_zero(f, c, x + flow(0, y, x), y + flow(1, y, x)), 1e-12);
}

TEST(Warp, IntegerShiftsCompose) {
  std::mt19937_64 rng(7);
  const auto f = oracle::random_tensor<double>(rng, 2, 8, 8);
  auto shift = [](double u, double v) {
    Tensor<double> fl(2, 8, 8);
    for (int i = 0; i < 64; ++i) {
      fl.channel(0)[i] = u;
      fl.channel(1)[i] = v;
    }
    return constant(fl);
  };
  const auto twice = warp(warp(constant(f), shift(1, 2)), shift(2, 1)).value();
  const auto once = warp(constant(f), shift(3, 3)).value();
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) EXPECT_NEAR(twice(c, y, x), once(c, y, x), 1e-12);
}

// Local correlation

TEST(Correlation, MatchesOracle) {
  std::mt19937_64 rng(8);
  const auto a = oracle::random_tensor<double>(rng, 4, 5, 5);
  const auto b = oracle::random_tensor<double>(rng, 4, 5, 5);
  const auto got = local_correlation(constant(a), constant(b), 3).value();
  const auto want = oracle::correlation(a, b, 3);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-5);
}

TEST(Correlation, ConstantUnitVectorIsUniformInBounds) {
  const int C = 90;
  Tensor<double> f(C, 9, 9);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> d;
  std::vector<double> v(C);
  double n = 0;
  for (auto& e : v) {
    e = d(rng);
    n += e * e;
  }
  for (auto& e : v) e /= std::sqrt(n);
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < 81; ++i) f.channel(c)[i] = v[c];
  const auto corr = local_correlation(constant(f), constant(f), 3).value();
  const double want = 1.0 / std::sqrt(90.0);
  for (int k = 0; k < 49; ++k) EXPECT_NEAR(corr(k, 4, 4), want, 1e-12);
}

TEST(Correlation, OrthogonalFeaturesPeakAtCentre) {
  const int H = 6, W = 6, C = H * W;
  Tensor<double> f(C, H, W);
  for (int i = 0; i < C; ++i) f.channel(i)[i] = 1.0;
  const auto corr = local_correlation(constant(f), constant(f), 3).value();
  for (int y = 1; y < H - 1; ++y)
    for (int x = 1; x < W - 1; ++x)
      for (int k = 0; k < 49; ++k) {
        if (k == 24) continue;
        EXPECT_GT(corr(24, y, x), corr(k, y, x));
      }
}

// Attention and softmax

TEST(Attention, RowsSumToOne) {
  std::mt19937_64 rng(10);
  const auto q = oracle::random_tensor<double>(rng, 6, 4, 5, -3, 3);
  const auto k = oracle::random_tensor<double>(rng, 6, 3, 7, -3, 3);
  const auto a = attention_probabilities(q, k, 0.5);
  ASSERT_EQ(a.rows(), 20);
  ASSERT_EQ(a.cols(), 21);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-12);
    EXPECT_GE(a.row(r).minCoeff(), 0.0);
  }
}

TEST(Softmax, GroupedSumsToOne) {
  std::mt19937_64 rng(11);
  const auto x = oracle::random_tensor<double>(rng, 9 * 4, 3, 3, -20, 20);
  const auto y = grouped_softmax(constant(x), 9).value();
  for (int s = 0; s < 4; ++s)
    for (int p = 0; p < 9; ++p) {
      double sum = 0;
      for (int g = 0; g < 9; ++g) sum += y.channel(g * 4 + s)[p];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

// Convex upsampling

TEST(ConvexUpsample, UniformMaskOnConstantFlow) {
  Tensor<double> flow(2, 3, 4);
  for (int i = 0; i < 12; ++i) {
    flow.channel(0)[i] = 1.25;
    flow.channel(1)[i] = -0.5;
  }
  const Tensor<double> mask(9 * 64, 3, 4, 1.0 / 9.0);
  const auto out = convex_upsample(constant(flow), constant(mask), 8).value();
  ASSERT_EQ(out.shape(), (Shape{2, 24, 32}));
  for (int i = 0; i < 24 * 32; ++i) {
    EXPECT_NEAR(out.channel(0)[i], 10.0, 1e-12);
    EXPECT_NEAR(out.channel(1)[i], -4.0, 1e-12);
  }
}

TEST(ConvexUpsample, CentreOneHotIsNearestReplication) {
  std::mt19937_64 rng(12);
  const auto flow = oracle::random_tensor<double>(rng, 2, 3, 3, -2, 2);
  Tensor<double> mask(9 * 64, 3, 3);
  for (int s = 0; s < 64; ++s)
    for (int p = 0; p < 9; ++p) mask.channel(4 * 64 + s)[p] = 1.0;
  const auto out = convex_upsample(constant(flow), constant(mask), 8).value();
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 24; ++x) EXPECT_DOUBLE_EQ(out(c, y, x), 8.0 * flow(c, y / 8, x / 8));
}

TEST(ConvexUpsample, StaysInsideNeighbourhoodHull) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const auto flow = oracle::random_tensor<double>(rng, 2, 4, 5, -5, 5);
    const auto logits = oracle::random_tensor<double>(rng, 9 * 64, 4, 5, -4, 4);
    const auto mask = grouped_softmax(constant(logits), 9);
    const auto out = convex_upsample(constant(flow), mask, 8).value();
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 40; ++x) {
          double lo = 1e300, hi = -1e300;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const double v = flow(c, std::clamp(y / 8 + dy, 0, 3), std::clamp(x / 8 + dx, 0, 4));
              lo = std::min(lo, v);
              hi = std::max(hi, v);
            }
          EXPECT_GE(out(c, y, x), 8 * lo - 1e-9);
          EXPECT_LE(out(c, y, x), 8 * hi + 1e-9);
        }
  }
}

TEST(ConvexUpsample, ZeroFlowGivesZero) {
  std::mt19937_64 rng(14);
  const auto mask = grouped_softmax(constant(oracle::random_tensor<double>(rng, 9 * 64, 2, 2)), 9);
  const auto out = convex_upsample(constant(Tensor<double>(2, 2, 2)), mask, 8).value();
  for (double v : out.storage()) EXPECT_EQ(v, 0.0);
}

TEST(ConvexUpsample, LinearInFlow) {
  std::mt19937_64 rng(15);
  const auto mask = grouped_softmax(constant(oracle::random_tensor<double>(rng, 9 * 64, 3, 3)), 9);
  const auto a = oracle::random_tensor<double>(rng, 2, 3, 3);
  const auto b = oracle::random_tensor<double>(rng, 2, 3, 3);
  Tensor<double> sum = a;
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = 2.0 * a[i] - 3.0 * b[i];
  const auto oa = convex_upsample(constant(a), mask, 8).value();
  const auto ob = convex_upsample(constant(b), mask, 8).value();
  const auto os = convex_upsample(constant(sum), mask, 8).value();
  for (std::size_t i = 0; i < os.size(); ++i) EXPECT_NEAR(os[i], 2.0 * oa[i] - 3.0 * ob[i], 1e-10);
}

TEST(ConvexUpsample, RejectsWrongMaskShape) {
  EXPECT_THROW(convex_upsample(constant(Tensor<double>(2, 3, 3)), constant(Tensor<double>(9 * 64, 3, 4)), 8),
               ShapeError);
}

// Loss

TEST(MaskedL1, SumsChannelsAndAveragesValidPixels) {
  Tensor<double> pred(2, 1, 3), target(2, 1, 3);
  pred(0, 0, 0) = 1.0;
  pred(1, 0, 0) = -2.0;
  pred(0, 0, 2) = 100.0;
  ValidMask valid(1, 3, true);
  valid.set(0, 2, false);
  EXPECT_DOUBLE_EQ(masked_l1(constant(pred), target, valid).value()[0], 1.5);
  EXPECT_DOUBLE_EQ(masked_l1(constant(pred), target, ValidMask(1, 3, false)).value()[0], 0.0);
}

// Gradients of individual ops against central differences.

TEST(OpGradients, Conv) {
  std::mt19937_64 rng(20);
  const double err = gradcheck::check_op(
      [](const auto& v) { return gradcheck::project(conv2d(v[0], v[1], v[2], ConvGeometry{4, 2, 1})); },
      {oracle::random_tensor<double>(rng, 2, 6, 6), oracle::random_tensor<double>(rng, 3, 2, 16),
       oracle::random_tensor<double>(rng, 3, 1, 1)});
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradients, PointwiseConv) {
  std::mt19937_64 rng(21);
  const double err = gradcheck::check_op(
      [](const auto& v) { return gradcheck::project(conv2d(v[0], v[1], v[2], ConvGeometry{1, 1, 0})); },
      {oracle::random_tensor<double>(rng, 3, 4, 4), oracle::random_tensor<double>(rng, 2, 3, 1),
       oracle::random_tensor<double>(rng, 2, 1, 1)});
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradients, GroupNorm) {
  std::mt19937_64 rng(22);
  const double err = gradcheck::check_op(
      [](const auto& v) { return gradcheck::project(group_norm(v[0], v[1], v[2], 2)); },
      {oracle::random_tensor<double>(rng, 4, 3, 3), oracle::random_tensor<double>(rng, 4, 1, 1),
       oracle::random_tensor<double>(rng, 4, 1, 1)});
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradients, LayerNorm) {
  std::mt19937_64 rng(23);
  const double err = gradcheck::check_op(
      [](const auto& v) { return gradcheck::project(layer_norm(v[0], v[1], v[2])); },
      {oracle::random_tensor<double>(rng, 5, 2, 3), oracle::random_tensor<double>(rng, 5, 1, 1),
       oracle::random_tensor<double>(rng, 5, 1, 1)});
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradients, Attention) {
  std::mt19937_64 rng(24);
  const double err = gradcheck::check_op(
      [](const auto& v) { return gradcheck::project(attention(v[0], v[1], v[2], 0.7)); },
      {oracle::random_tensor<double>(rng, 3, 2, 3), oracle::random_tensor<double>(rng, 3, 3, 2),
       oracle::random_tensor<double>(rng, 2, 3, 2)});
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradients, Warp) {
  std::mt19937_64 rng(25);
  // Fractional offsets away from integer cell boundaries keep the probe on one linear piece.
  Tensor<double> flow(2, 4, 5);
  std::uniform_real_distribution<double> frac(0.2, 0.8);
  std::uniform_int_distribution<int> whole(-2, 1);
  for (auto& v : flow.storage()) v = whole(rng) + frac(rng);
  const double err = gradcheck::check_op([](const auto& v) { return gradcheck::project(warp(v[0], v[1])); },
                                         {oracle::random_tensor<double>(rng, 3, 4, 5), flow});
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradients, LocalCorrelation) {
  std::mt19937_64 rng(26);
  const double err = gradcheck::check_op(
      [](const auto& v) { return gradcheck::project(local_correlation(v[0], v[1], 2)); },
      {oracle::random_tensor<double>(rng, 3, 4, 5), oracle::random_tensor<double>(rng, 3, 4, 5)});
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradients, ConvexUpsampleAndSoftmax) {
  std::mt19937_64 rng(27);
  const double err = gradcheck::check_op(
      [](const auto& v) { return gradcheck::project(convex_upsample(v[0], grouped_softmax(v[1], 9), 2)); },
      {oracle::random_tensor<double>(rng, 2, 2, 3), oracle::random_tensor<double>(rng, 36, 2, 3)});
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradients, ResizeCropPoolConcat) {
  std::mt19937_64 rng(28);
  const double err = gradcheck::check_op(
      [](const auto& v) {
        const auto up = resize_bilinear(v[0], 6, 8, 2.0);
        return gradcheck::project(concat<double>({crop(up, 4, 6), avg_pool2(v[1])}));
      },
      {oracle::random_tensor<double>(rng, 2, 3, 4), oracle::random_tensor<double>(rng, 1, 8, 12)});
  EXPECT_LT(err, 1e-6);
}

TEST(OpGradients, MaskedL1) {
  std::mt19937_64 rng(29);
  const auto target = oracle::random_tensor<double>(rng, 2, 3, 3);
  Tensor<double> pred = target;
  std::uniform_real_distribution<double> off(0.1, 1.0);
  for (auto& v : pred.storage()) v += (rng() % 2 ? 1 : -1) * off(rng);
  ValidMask valid(3, 3, true);
  valid.set(1, 1, false);
  const double err =
      gradcheck::check_op([&](const auto& v) { return masked_l1(v[0], target, valid); }, {pred});
  EXPECT_LT(err, 1e-6);
}

TEST(BranchTrace, DetectsReluSignChange) {
  Tensor<double> x(1, 1, 2);
  x[0] = 0.5;
  x[1] = -0.5;
  auto hash_of = [](const Tensor<double>& t) {
    BranchTrace trace;
    relu(constant(t));
    return trace.hash();
  };
  const auto base = hash_of(x);
  x[0] = 0.4;
  EXPECT_EQ(hash_of(x), base);
  x[0] = -0.1;
  EXPECT_NE(hash_of(x), base);
}

}  // namespace
