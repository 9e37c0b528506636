// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "lidarflow/common.hpp"
#include "lidarflow/ops.hpp"

using namespace lidarflow;

namespace {

Tensor<float> random_tensor(const Shape& s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(s.numel()));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor<float>::constant(s, std::move(v));
}

}  // namespace

TEST(Conv2d, IdentityKernel) {
  auto x = Tensor<float>::constant(Shape{1, 1, 1, 1}, {5.0f});
  auto w = Tensor<float>::constant(Shape{1, 1, 1, 1}, {1.0f});
  auto b = Tensor<float>::constant(Shape{1, 1, 1, 1}, {0.0f});
  auto y = conv2d(x, w, b, 1, 0, 1);
  EXPECT_FLOAT_EQ(y.item(), 5.0f);
}

TEST(Conv2d, ConstantImageAllOnesKernel) {
  // interior pixels see 9c, corner pixels 4c under zero padding
  const float c = 2.5f;
  auto x = Tensor<float>::constant(Shape{1, 1, 5, 6}, c);
  auto w = Tensor<float>::constant(Shape{1, 1, 3, 3}, 1.0f);
  auto b = Tensor<float>::constant(Shape{1, 1, 1, 1}, 0.0f);
  auto y = conv2d(x, w, b, 1, 1, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 5, 6}));
  EXPECT_FLOAT_EQ(y.value_at(0, 0, 2, 3), 9 * c);
  EXPECT_FLOAT_EQ(y.value_at(0, 0, 0, 0), 4 * c);
  EXPECT_FLOAT_EQ(y.value_at(0, 0, 4, 5), 4 * c);
  EXPECT_FLOAT_EQ(y.value_at(0, 0, 0, 3), 6 * c);  // edge, not corner
}

TEST(Conv2d, DilatedOutputShape) {
  auto x = random_tensor(Shape{2, 3, 8, 8}, 1);
  auto w = random_tensor(Shape{4, 3, 3, 3}, 2);
  auto b = Tensor<float>::constant(Shape{1, 4, 1, 1}, 0.0f);
  auto y = conv2d(x, w, b, 1, 2, 2);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 8, 8}));
}

TEST(Conv2d, StrideTwoShapeLaw) {
  auto x = random_tensor(Shape{1, 1, 64, 256}, 3);
  auto w = random_tensor(Shape{16, 1, 3, 3}, 4);
  auto b = Tensor<float>::constant(Shape{1, 16, 1, 1}, 0.0f);
  auto y = conv2d(x, w, b, 2, 1, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 16, 32, 128}));
}

TEST(Conv2d, ShapeMismatchNamesOperand) {
  auto x = random_tensor(Shape{1, 2, 4, 4}, 5);
  auto w = random_tensor(Shape{3, 5, 3, 3}, 6);
  auto b = Tensor<float>::constant(Shape{1, 3, 1, 1}, 0.0f);
  try {
    conv2d(x, w, b, 1, 1, 1);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
  }
}

TEST(Conv2d, LinearInInput) {
  auto x = random_tensor(Shape{1, 2, 6, 6}, 7);
  auto y = random_tensor(Shape{1, 2, 6, 6}, 8);
  auto w = random_tensor(Shape{3, 2, 3, 3}, 9);
  auto b = Tensor<float>::constant(Shape{1, 3, 1, 1}, 0.0f);
  const float a = 1.7f, bb = -0.6f;

  std::vector<float> mixed(x.values().size());
  for (std::size_t i = 0; i < mixed.size(); ++i)
    mixed[i] = a * x.values()[i] + bb * y.values()[i];
  auto lhs = conv2d(Tensor<float>::constant(x.shape(), mixed), w, b, 1, 1, 1);
  auto cx = conv2d(x, w, b, 1, 1, 1);
  auto cy = conv2d(y, w, b, 1, 1, 1);
  for (std::size_t i = 0; i < lhs.values().size(); ++i) {
    const double want = a * cx.values()[i] + bb * cy.values()[i];
    EXPECT_NEAR(lhs.values()[i], want, 1e-6 * std::max(1.0, std::abs(want)));
  }
}

TEST(Activation, LeakyReluAndSigmoid) {
  auto x = Tensor<float>::constant(Shape{1, 1, 1, 3}, {-1.0f, 0.0f, 3.0f});
  auto lr = activation(x, Activation::LeakyRelu);
  EXPECT_FLOAT_EQ(lr.values()[0], -0.1f);
  EXPECT_FLOAT_EQ(lr.values()[1], 0.0f);
  EXPECT_FLOAT_EQ(lr.values()[2], 3.0f);
  auto sg = activation(x, Activation::Sigmoid);
  EXPECT_FLOAT_EQ(sg.values()[1], 0.5f);
}

TEST(Pool, ConstantFieldIsInvariant) {
  const float c = 4.25f;
  auto x = Tensor<float>::constant(Shape{2, 3, 4, 5}, c);
  for (auto axis : {PoolAxis::Spatial, PoolAxis::Channel})
    for (auto kind : {PoolKind::Avg, PoolKind::Max}) {
      auto y = pool(x, axis, kind);
      for (float v : y.values()) EXPECT_FLOAT_EQ(v, c);
    }
}

TEST(Pool, ChannelReduction) {
  // channels [1, 3] at a pixel: max 3, avg 2
  auto x = Tensor<float>::constant(Shape{1, 2, 1, 1}, {1.0f, 3.0f});
  EXPECT_FLOAT_EQ(pool(x, PoolAxis::Channel, PoolKind::Max).item(), 3.0f);
  EXPECT_FLOAT_EQ(pool(x, PoolAxis::Channel, PoolKind::Avg).item(), 2.0f);
}

TEST(Pool, SpatialAverage) {
  auto x = Tensor<float>::constant(Shape{1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  EXPECT_FLOAT_EQ(pool(x, PoolAxis::Spatial, PoolKind::Avg).item(), 2.5f);
}

TEST(Pool, ShapeContracts) {
  auto x = random_tensor(Shape{2, 3, 4, 5}, 11);
  EXPECT_EQ(pool(x, PoolAxis::Spatial, PoolKind::Max).shape(), (Shape{2, 3, 1, 1}));
  EXPECT_EQ(pool(x, PoolAxis::Channel, PoolKind::Max).shape(), (Shape{2, 1, 4, 5}));
}

TEST(Pool, MaxTieGradientGoesToLowestIndex) {
  auto x = Tensor<double>::variable(Shape{1, 1, 1, 3}, {2.0, 2.0, 1.0});
  auto loss = sum_all(pool(x, PoolAxis::Spatial, PoolKind::Max));
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
}

TEST(Upsample2x, ConstantStaysConstant) {
  auto x = Tensor<float>::constant(Shape{1, 2, 3, 4}, 1.75f);
  auto y = upsample2x(x);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 6, 8}));
  for (float v : y.values()) EXPECT_FLOAT_EQ(v, 1.75f);
}

TEST(Upsample2x, SingleSampleReplicates) {
  auto x = Tensor<float>::constant(Shape{1, 1, 1, 1}, {7.0f});
  auto y = upsample2x(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (float v : y.values()) EXPECT_FLOAT_EQ(v, 7.0f);
}

TEST(Upsample2x, BilinearWeightsByHand) {
  // [0, 2] -> [0, 0.5, 1.5, 2] under the half-pixel-center convention
  auto x = Tensor<float>::constant(Shape{1, 1, 1, 2}, {0.0f, 2.0f});
  auto y = upsample2x(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  EXPECT_FLOAT_EQ(y.value_at(0, 0, 0, 0), 0.0f);
  EXPECT_FLOAT_EQ(y.value_at(0, 0, 0, 1), 0.5f);
  EXPECT_FLOAT_EQ(y.value_at(0, 0, 0, 2), 1.5f);
  EXPECT_FLOAT_EQ(y.value_at(0, 0, 0, 3), 2.0f);
}

TEST(Backwarp, ZeroFlowIsBitExactIdentity) {
  auto src = random_tensor(Shape{2, 3, 6, 7}, 21, 0.0, 80.0);
  auto flow = Tensor<float>::constant(Shape{2, 2, 6, 7}, 0.0f);
  auto out = backwarp(src, flow);
  ASSERT_EQ(out.shape(), src.shape());
  for (std::size_t i = 0; i < out.values().size(); ++i)
    EXPECT_EQ(out.values()[i], src.values()[i]);  // bit exact
}

TEST(Backwarp, IntegerShiftIndexArithmetic) {
  auto src = Tensor<float>::constant(Shape{1, 1, 1, 4}, {10.0f, 20.0f, 30.0f, 40.0f});
  auto flow =
      Tensor<float>::constant(Shape{1, 2, 1, 4}, {1, 1, 1, 1, 0, 0, 0, 0});  // u=+1, v=0
  auto out = backwarp(src, flow);
  EXPECT_FLOAT_EQ(out.value_at(0, 0, 0, 0), 20.0f);
  EXPECT_FLOAT_EQ(out.value_at(0, 0, 0, 1), 30.0f);
  EXPECT_FLOAT_EQ(out.value_at(0, 0, 0, 2), 40.0f);
  EXPECT_FLOAT_EQ(out.value_at(0, 0, 0, 3), 0.0f);  // out of bounds -> 0
}

TEST(Backwarp, HalfPixelBilinearAverage) {
  auto src = Tensor<float>::constant(Shape{1, 1, 1, 2}, {0.0f, 2.0f});
  auto flow = Tensor<float>::constant(Shape{1, 2, 1, 2}, {0.5f, 0.5f, 0.0f, 0.0f});
  auto out = backwarp(src, flow);
  EXPECT_FLOAT_EQ(out.value_at(0, 0, 0, 0), 1.0f);
}

TEST(Backwarp, ShapeMismatchIsAnError) {
  auto src = random_tensor(Shape{1, 1, 4, 4}, 3);
  auto flow = Tensor<float>::constant(Shape{1, 2, 4, 5}, 0.0f);
  EXPECT_THROW(backwarp(src, flow), Error);
  auto flow3 = Tensor<float>::constant(Shape{1, 3, 4, 4}, 0.0f);
  EXPECT_THROW(backwarp(src, flow3), Error);
}

TEST(Correlation, ConstantFeatures) {
  // f1 = f2 = 2 over C=4: displacement (0,0) channel = (sum 2*2)/4 = 4
  auto f = Tensor<float>::constant(Shape{1, 4, 5, 6}, 2.0f);
  auto cv = correlation(f, f, 1);
  EXPECT_EQ(cv.shape(), (Shape{1, 9, 5, 6}));
  const int center = 4;  // (dy=0, dx=0) with radius 1
  EXPECT_FLOAT_EQ(cv.value_at(0, center, 2, 3), 4.0f);
}

TEST(Correlation, ZeroFactorAndOrthogonality) {
  auto zero = Tensor<float>::constant(Shape{1, 2, 4, 4}, 0.0f);
  auto f2 = random_tensor(Shape{1, 2, 4, 4}, 31);
  auto zero_cv = correlation(zero, f2, 1);
  for (float v : zero_cv.values()) EXPECT_FLOAT_EQ(v, 0.0f);

  // one-hot on disjoint channels: (0,0) channel is 0 everywhere
  auto a = Tensor<float>::constant(Shape{1, 2, 2, 2}, {1, 1, 1, 1, 0, 0, 0, 0});
  auto b = Tensor<float>::constant(Shape{1, 2, 2, 2}, {0, 0, 0, 0, 1, 1, 1, 1});
  auto cv = correlation(a, b, 1);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) EXPECT_FLOAT_EQ(cv.value_at(0, 4, y, x), 0.0f);
}

TEST(Correlation, CenterChannelSymmetry) {
  auto f1 = random_tensor(Shape{1, 3, 5, 5}, 41);
  auto f2 = random_tensor(Shape{1, 3, 5, 5}, 42);
  auto ab = correlation(f1, f2, 2);
  auto ba = correlation(f2, f1, 2);
  const int center = 12;  // (0,0) displacement with radius 2
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x)
      EXPECT_FLOAT_EQ(ab.value_at(0, center, y, x), ba.value_at(0, center, y, x));
}

TEST(AvgPool2x2, BlockAverage) {
  auto x = Tensor<float>::constant(Shape{1, 1, 2, 2}, {0.0f, 0.0f, 4.0f, 4.0f});
  EXPECT_FLOAT_EQ(avg_pool2x2(x).item(), 2.0f);
}

TEST(Elementwise, AddSubMulScale) {
  auto a = Tensor<float>::constant(Shape{1, 1, 1, 2}, {1.0f, 2.0f});
  auto b = Tensor<float>::constant(Shape{1, 1, 1, 2}, {3.0f, 5.0f});
  EXPECT_FLOAT_EQ(add(a, b).values()[1], 7.0f);
  EXPECT_FLOAT_EQ(sub(a, b).values()[0], -2.0f);
  EXPECT_FLOAT_EQ(mul(a, b).values()[1], 10.0f);
  EXPECT_FLOAT_EQ(scale(a, -2.0).values()[0], -2.0f);
  EXPECT_THROW(add(a, Tensor<float>::constant(Shape{1, 1, 2, 1}, 0.0f)), Error);
}

TEST(Elementwise, BroadcastGates) {
  auto x = Tensor<float>::constant(Shape{1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto channel_gate = Tensor<float>::constant(Shape{1, 2, 1, 1}, {2.0f, 0.5f});
  auto y = mul(x, channel_gate);
  EXPECT_FLOAT_EQ(y.value_at(0, 0, 1, 1), 8.0f);
  EXPECT_FLOAT_EQ(y.value_at(0, 1, 0, 0), 2.5f);

  auto spatial_gate = Tensor<float>::constant(Shape{1, 1, 2, 2}, {1, 0, 0, 1});
  auto z = mul(x, spatial_gate);
  EXPECT_FLOAT_EQ(z.value_at(0, 1, 0, 1), 0.0f);
  EXPECT_FLOAT_EQ(z.value_at(0, 1, 1, 1), 8.0f);
}

TEST(Concat, ChannelsStack) {
  auto a = Tensor<float>::constant(Shape{2, 1, 1, 2}, {1, 2, 3, 4});
  auto b = Tensor<float>::constant(Shape{2, 2, 1, 2}, {5, 6, 7, 8, 9, 10, 11, 12});
  auto y = concat_channels(a, b);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 1, 2}));
  EXPECT_FLOAT_EQ(y.value_at(0, 0, 0, 0), 1.0f);
  EXPECT_FLOAT_EQ(y.value_at(0, 1, 0, 0), 5.0f);
  EXPECT_FLOAT_EQ(y.value_at(1, 0, 0, 1), 4.0f);
  EXPECT_FLOAT_EQ(y.value_at(1, 2, 0, 1), 12.0f);
}

TEST(Reductions, SumMeanSqrt) {
  auto x = Tensor<float>::constant(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_FLOAT_EQ(sum_all(x).item(), 10.0f);
  EXPECT_FLOAT_EQ(mean_all(x).item(), 2.5f);
  EXPECT_FLOAT_EQ(lidarflow::sqrt(Tensor<float>::constant(Shape{1, 1, 1, 1}, 9.0f)).item(), 3.0f);
}
