// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "lidarflow/loss.hpp"
#include "lidarflow/model.hpp"
#include "lidarflow/ops.hpp"

using namespace lidarflow;

namespace {

Tensor<float> random_tensor(const Shape& s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(s.numel()));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor<float>::constant(s, std::move(v));
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

}  // namespace

TEST(ModelConfig, DefaultsMatchArchitecture) {
  ModelConfig cfg;
  cfg.validate();
  EXPECT_EQ(cfg.cost_channels(), 81);
  EXPECT_EQ(cfg.estimator_input_channels(), 115);
  EXPECT_EQ(cfg.pyramid_channels, (std::array<int, 7>{1, 16, 32, 64, 96, 128, 192}));
  EXPECT_EQ(cfg.context_dilations, (std::array<int, 7>{1, 2, 4, 8, 16, 1, 1}));
}

TEST(ParamCount, FullModelInPaperRange) {
  ParameterStore<float> store;
  init_model_params(store, ModelConfig{}, 1);
  const auto count = param_count(store);
  EXPECT_GE(count, 2'000'000);
  EXPECT_LE(count, 2'500'000);
  // rounds to the reported 2.25M
  EXPECT_NEAR(static_cast<double>(count) / 1e6, 2.25, 0.005);
}

TEST(ParamCount, CbamRemovalIsSmall) {
  ParameterStore<float> with_cbam, without_cbam;
  init_model_params(with_cbam, ModelConfig{}, 1);
  ModelConfig no_cbam;
  no_cbam.use_cbam = false;
  init_model_params(without_cbam, no_cbam, 1);

  const auto full = param_count(with_cbam);
  const auto reduced = param_count(without_cbam);
  EXPECT_LT(reduced, full);
  EXPECT_LE(full - reduced, static_cast<std::int64_t>(0.015 * full));
  // and rounds to the reported 2.24M reference
  EXPECT_NEAR(static_cast<double>(reduced) / 1e6, 2.24, 0.005);

  std::int64_t cbam_params = 0;
  with_cbam.for_each([&](const std::string& name, const Tensor<float>& p) {
    if (name.starts_with("cbam.")) cbam_params += p.numel();
  });
  EXPECT_EQ(full - reduced, cbam_params);
}

TEST(ParamCount, EmptyStoreIsZero) {
  ParameterStore<float> store;
  EXPECT_EQ(param_count(store), 0);
}

TEST(Pyramid, ShapesForKittiFrame) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 2);
  auto image = random_tensor(Shape{1, 1, 64, 1024}, 3, 0, 1);
  auto feats = pyramid_forward(image, store, cfg);
  ASSERT_EQ(feats.size(), 6u);
  EXPECT_EQ(feats[0].shape(), (Shape{1, 16, 32, 512}));
  EXPECT_EQ(feats[1].shape(), (Shape{1, 32, 16, 256}));
  EXPECT_EQ(feats[2].shape(), (Shape{1, 64, 8, 128}));
  EXPECT_EQ(feats[3].shape(), (Shape{1, 96, 4, 64}));
  EXPECT_EQ(feats[4].shape(), (Shape{1, 128, 2, 32}));
  EXPECT_EQ(feats[5].shape(), (Shape{1, 192, 1, 16}));
}

TEST(Pyramid, IndivisibleExtentsErrorMentionsPadding) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 2);
  try {
    pyramid_forward(random_tensor(Shape{1, 1, 60, 100}, 4), store, cfg);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
}

TEST(Pyramid, ZeroInputIsFiniteAndDeterministic) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 5);
  auto zero = Tensor<float>::constant(Shape{1, 1, 64, 64}, 0.0f);
  auto a = pyramid_forward(zero, store, cfg);
  auto b = pyramid_forward(zero, store, cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(all_finite(a[i]));
    EXPECT_TRUE(bit_equal(a[i], b[i]));
  }
}

TEST(Cbam, ZeroInputGivesZeroOutput) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 6);
  auto x = Tensor<float>::constant(Shape{2, 16, 4, 8}, 0.0f);
  auto y = cbam_forward(x, store, 2, cfg);
  EXPECT_EQ(y.shape(), x.shape());
  for (float v : y.values()) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(Cbam, GatesLieStrictlyInsideUnitInterval) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 7);
  auto x = random_tensor(Shape{2, 32, 4, 8}, 8);
  auto detail = cbam_forward_detail(x, store, 3, cfg);
  EXPECT_EQ(detail.channel_gate.shape(), (Shape{2, 32, 1, 1}));
  EXPECT_EQ(detail.spatial_gate.shape(), (Shape{2, 1, 4, 8}));
  for (float g : detail.channel_gate.values()) {
    EXPECT_GT(g, 0.0f);
    EXPECT_LT(g, 1.0f);
  }
  for (float g : detail.spatial_gate.values()) {
    EXPECT_GT(g, 0.0f);
    EXPECT_LT(g, 1.0f);
  }
}

TEST(Cbam, OutputIsAttenuatedWhereNonzero) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 9);
  auto x = random_tensor(Shape{1, 16, 6, 10}, 10);
  auto y = cbam_forward(x, store, 2, cfg);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.values().size(); ++i) {
    if (x.values()[i] != 0.0f)
      EXPECT_LT(std::abs(y.values()[i]), std::abs(x.values()[i]));
  }
}

TEST(CostVolume, MatchingFeaturesPeakAtCenter) {
  // with enough channels the self-match dominates every cross-match
  ModelConfig cfg;
  const int h = 12, w = 14;
  auto f = random_tensor(Shape{1, 64, h, w}, 11);
  auto cv = build_cost_volume<float>(f, f, nullptr, cfg).volume;
  const int d = 2 * cfg.cost_radius + 1;
  const int center = cfg.cost_radius * d + cfg.cost_radius;
  for (int y = cfg.cost_radius; y < h - cfg.cost_radius; ++y)
    for (int x = cfg.cost_radius; x < w - cfg.cost_radius; ++x) {
      const float at_center = cv.value_at(0, center, y, x);
      for (int q = 0; q < d * d; ++q)
        EXPECT_GE(at_center, cv.value_at(0, q, y, x));
    }
}

TEST(CostVolume, WarpThenCorrelateCancelsShift) {
  ModelConfig cfg;
  cfg.cost_radius = 2;
  const int h = 10, w = 16, c = 6;
  auto f1 = random_tensor(Shape{1, c, h, w}, 12);

  // f2 is f1 shifted one column right; up_flow = (+1, 0) undoes it
  std::vector<float> shifted(f1.values().size(), 0.0f);
  const Shape& s = f1.shape();
  for (int ic = 0; ic < c; ++ic)
    for (int y = 0; y < h; ++y)
      for (int x = 1; x < w; ++x)
        shifted[s.index(0, ic, y, x)] = f1.values()[s.index(0, ic, y, x - 1)];
  auto f2 = Tensor<float>::constant(s, shifted);
  std::vector<float> uv(2 * h * w, 0.0f);
  for (int i = 0; i < h * w; ++i) uv[i] = 1.0f;
  auto up_flow = Tensor<float>::constant(Shape{1, 2, h, w}, uv);

  auto with_warp = build_cost_volume(f1, f2, &up_flow, cfg).volume;
  auto reference = build_cost_volume<float>(f1, f1, nullptr, cfg).volume;
  const int r = cfg.cost_radius;
  for (int q = 0; q < (2 * r + 1) * (2 * r + 1); ++q)
    for (int y = 0; y < h; ++y)
      for (int x = r + 1; x < w - r - 2; ++x)
        EXPECT_NEAR(with_warp.value_at(0, q, y, x), reference.value_at(0, q, y, x), 1e-5);
}

TEST(CostVolume, ZeroFeaturesGiveZeroVolume) {
  ModelConfig cfg;
  auto zero = Tensor<float>::constant(Shape{1, 4, 6, 6}, 0.0f);
  auto cv = build_cost_volume<float>(zero, zero, nullptr, cfg).volume;
  for (float v : cv.values()) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(Estimator, Level7ShapeForKittiFrame) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 13);
  auto f1 = random_tensor(Shape{1, 192, 1, 16}, 14);
  auto cv = random_tensor(Shape{1, 81, 1, 16}, 15);
  auto result = estimate_flow_level<float>(f1, cv, nullptr, store, 7, cfg);
  EXPECT_EQ(result.flow.shape(), (Shape{1, 2, 1, 16}));
  EXPECT_EQ(result.penultimate.shape(), (Shape{1, 32, 1, 16}));
}

TEST(Estimator, SharedWeightsByNameEnumeration) {
  ParameterStore<float> store;
  init_model_params(store, ModelConfig{}, 16);
  int estimator_entries = 0, context_entries = 0;
  std::set<std::string> adapter_levels;
  store.for_each([&](const std::string& name, const Tensor<float>&) {
    if (name.starts_with("estimator.")) ++estimator_entries;
    if (name.starts_with("context.")) ++context_entries;
    if (name.starts_with("adapter.l")) adapter_levels.insert(name.substr(0, 10));
  });
  EXPECT_EQ(estimator_entries, 12);  // one shared set: 6 convs x (weight, bias)
  EXPECT_EQ(context_entries, 14);    // one shared set: 7 convs x (weight, bias)
  EXPECT_EQ(adapter_levels.size(), 6u);
}

TEST(Estimator, CoreIsDeterministic) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 17);
  auto x = random_tensor(Shape{1, 115, 4, 6}, 18);
  auto a = estimator_core(x, store, cfg);
  auto b = estimator_core(x, store, cfg);
  EXPECT_TRUE(bit_equal(a.flow, b.flow));
  EXPECT_TRUE(bit_equal(a.penultimate, b.penultimate));
}

TEST(Context, ZeroedFinalLayerIsIdentity) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 19);
  auto w = store.get("context.conv7.weight");
  auto b = store.get("context.conv7.bias");
  std::fill(w.mutable_values().begin(), w.mutable_values().end(), 0.0f);
  std::fill(b.mutable_values().begin(), b.mutable_values().end(), 0.0f);

  auto penult = random_tensor(Shape{1, 32, 4, 8}, 20);
  auto flow = random_tensor(Shape{1, 2, 4, 8}, 21);
  auto refined = context_refine(penult, flow, store, cfg);
  EXPECT_TRUE(bit_equal(refined, flow));
}

TEST(Context, DilationSixteenPreservesTinyExtents) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 22);
  auto penult = random_tensor(Shape{1, 32, 1, 16}, 23);
  auto flow = random_tensor(Shape{1, 2, 1, 16}, 24);
  auto refined = context_refine(penult, flow, store, cfg);
  EXPECT_EQ(refined.shape(), (Shape{1, 2, 1, 16}));
  EXPECT_TRUE(all_finite(refined));
}

TEST(FlowUpsampling, UniformFlowScalesExactly) {
  auto flow = Tensor<float>::constant(Shape{1, 2, 4, 8}, 0.0f);
  std::vector<float> v(flow.numel());
  for (int i = 0; i < 4 * 8; ++i) v[i] = 3.5f;
  for (int i = 4 * 8; i < 2 * 4 * 8; ++i) v[i] = -1.25f;
  flow = Tensor<float>::constant(Shape{1, 2, 4, 8}, v);
  auto up = scale(upsample2x(flow), 2.0);
  ASSERT_EQ(up.shape(), (Shape{1, 2, 8, 16}));
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 16; ++x) {
      EXPECT_FLOAT_EQ(up.value_at(0, 0, y, x), 7.0f);
      EXPECT_FLOAT_EQ(up.value_at(0, 1, y, x), -2.5f);
    }
}

TEST(ModelForward, ShapeChainAndDeterminism) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 25);
  auto I1 = random_tensor(Shape{1, 1, 64, 256}, 26, 0, 1);
  auto I2 = random_tensor(Shape{1, 1, 64, 256}, 27, 0, 1);
  auto flows = model_forward(I1, I2, store, cfg);
  EXPECT_EQ(flows[0].shape(), (Shape{1, 2, 64, 256}));
  EXPECT_EQ(flows[1].shape(), (Shape{1, 2, 32, 128}));
  EXPECT_EQ(flows[2].shape(), (Shape{1, 2, 16, 64}));
  EXPECT_EQ(flows[3].shape(), (Shape{1, 2, 8, 32}));
  EXPECT_EQ(flows[4].shape(), (Shape{1, 2, 4, 16}));
  EXPECT_EQ(flows[5].shape(), (Shape{1, 2, 2, 8}));
  EXPECT_EQ(flows[6].shape(), (Shape{1, 2, 1, 4}));
  for (const auto& f : flows) EXPECT_TRUE(all_finite(f));

  auto again = model_forward(I1, I2, store, cfg);
  for (int l = 0; l < 7; ++l) EXPECT_TRUE(bit_equal(flows[l], again[l]));
}

TEST(ModelForward, MismatchedFramesError) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 28);
  auto I1 = random_tensor(Shape{1, 1, 64, 64}, 29, 0, 1);
  auto I2 = random_tensor(Shape{1, 1, 64, 128}, 30, 0, 1);
  EXPECT_THROW(model_forward(I1, I2, store, cfg), Error);
}

TEST(ModelForward, EveryParameterReceivesGradient) {
  ParameterStore<float> store;
  ModelConfig cfg;
  init_model_params(store, cfg, 31);
  auto I1 = random_tensor(Shape{2, 1, 64, 64}, 32, 0.05, 1.0);
  auto I2 = random_tensor(Shape{2, 1, 64, 64}, 33, 0.05, 1.0);
  auto flows = model_forward(I1, I2, store, cfg);
  LossWeights weights;
  auto loss = training_loss(flows, I1, I2, weights);
  backward(loss, store);
  store.for_each([](const std::string& name, const Tensor<float>& p) {
    double norm = 0;
    for (float g : p.grad()) norm += std::abs(static_cast<double>(g));
    EXPECT_GT(norm, 0.0) << "dead parameter: " << name;
  });
}
