// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "lidarflow/ops.hpp"
#include "lidarflow/tensor.hpp"

using namespace lidarflow;

TEST(Shape, NumelAndIndex) {
  Shape s{2, 3, 4, 5};
  EXPECT_EQ(s.numel(), 120);
  EXPECT_EQ(s.index(0, 0, 0, 0), 0);
  EXPECT_EQ(s.index(1, 2, 3, 4), 119);
  EXPECT_EQ(s.to_string(), "(2,3,4,5)");
}

TEST(Tensor, ConstantAndVariable) {
  auto c = Tensor<float>::constant(Shape{1, 2, 2, 1}, 3.0f);
  EXPECT_FALSE(c.requires_grad());
  EXPECT_EQ(c.values()[3], 3.0f);

  auto v = Tensor<float>::variable(Shape{1, 1, 1, 1}, {2.0f});
  EXPECT_TRUE(v.requires_grad());
  EXPECT_TRUE(v.is_leaf());
  EXPECT_EQ(v.item(), 2.0f);

  EXPECT_THROW(Tensor<float>::constant(Shape{1, 1, 1, 2}, std::vector<float>{1.0f}), Error);
}

TEST(Tensor, FiniteValidation) {
  auto ok = Tensor<float>::constant(Shape{1, 1, 1, 2}, {1.0f, -2.0f});
  EXPECT_TRUE(all_finite(ok));
  auto bad = Tensor<float>::constant(Shape{1, 1, 1, 2},
                                     {1.0f, std::numeric_limits<float>::quiet_NaN()});
  EXPECT_FALSE(all_finite(bad));
  EXPECT_THROW(require_finite(bad, "test"), Error);
}

TEST(Backward, LinearMapGradientIsInput) {
  // loss = sum(w * x) with x constant => grad(w) = x
  auto x = Tensor<double>::constant(Shape{1, 1, 1, 3}, {1.0, 2.0, 3.0});
  auto w = Tensor<double>::variable(Shape{1, 1, 1, 3}, {0.5, 0.5, 0.5});
  auto loss = sum_all(mul(w, x));
  backward(loss);
  EXPECT_DOUBLE_EQ(w.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 2.0);
  EXPECT_DOUBLE_EQ(w.grad()[2], 3.0);
}

TEST(Backward, NoRecordedGraphIsAnError) {
  auto c = sum_all(Tensor<float>::constant(Shape{1, 1, 2, 2}, 1.0f));
  EXPECT_THROW(backward(c), Error);
}

TEST(Backward, NonScalarLossIsAnError) {
  auto v = Tensor<float>::variable(Shape{1, 1, 1, 2}, {1.0f, 2.0f});
  EXPECT_THROW(backward(leaky_relu(v)), Error);
}

TEST(Backward, RepeatedCallsAccumulateOnLeaves) {
  auto w = Tensor<double>::variable(Shape{1, 1, 1, 1}, {1.0});
  auto loss = scale(w, 3.0);
  backward(loss);
  EXPECT_DOUBLE_EQ(w.grad()[0], 3.0);
  backward(loss);
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
}

TEST(Backward, UnusedParameterGetsZeroGrad) {
  ParameterStore<double> store;
  auto used = store.create("used", Shape{1, 1, 1, 1}, {2.0});
  auto unused = store.create("unused", Shape{1, 1, 1, 2}, {1.0, 1.0});
  auto loss = sum_all(mul(used, used));
  backward(loss, store);
  EXPECT_DOUBLE_EQ(used.grad()[0], 4.0);
  ASSERT_TRUE(unused.has_grad());
  EXPECT_DOUBLE_EQ(unused.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(unused.grad()[1], 0.0);
}

TEST(Backward, SharedSubgraphAccumulates) {
  auto w = Tensor<double>::variable(Shape{1, 1, 1, 1}, {3.0});
  auto y = mul(w, w);  // y = w^2 -> dy/dw = 2w = 6
  auto loss = sum_all(y);
  backward(loss);
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
}

TEST(ParameterStore, NamesAreUniqueAndSorted) {
  ParameterStore<float> store;
  store.create("b", Shape{1, 1, 1, 1}, {0.0f});
  store.create("a", Shape{1, 1, 1, 1}, {0.0f});
  EXPECT_THROW(store.create("a", Shape{1, 1, 1, 1}, {0.0f}), Error);
  const auto names = store.names();
  ASSERT_EQ(names.size(), 2u);
  EXPECT_EQ(names[0], "a");
  EXPECT_EQ(names[1], "b");
  EXPECT_EQ(store.param_count(), 2);
  EXPECT_THROW(store.get("missing"), Error);
}

TEST(Adam, ZeroGradientIsIdentity) {
  ParameterStore<double> store;
  auto p = store.create("p", Shape{1, 1, 1, 2}, {1.5, -2.5});
  auto loss = sum_all(mul(p, Tensor<double>::constant(Shape{1, 1, 1, 2}, 0.0)));
  backward(loss, store);
  OptimizerConfig cfg;
  cfg.lr = 0.1;
  adam_step(store, cfg);
  EXPECT_DOUBLE_EQ(p.values()[0], 1.5);
  EXPECT_DOUBLE_EQ(p.values()[1], -2.5);
  EXPECT_EQ(store.step_count(), 1);
}

TEST(Adam, FirstStepBiasCorrectedUpdate) {
  // theta = 1, g = 0.5, lr = 0.1: m_hat = g, v_hat = g^2,
  // theta' = 1 - 0.1 * 0.5 / (0.5 + 1e-7)
  ParameterStore<double> store;
  auto p = store.create("p", Shape{1, 1, 1, 1}, {1.0});
  auto g = Tensor<double>::constant(Shape{1, 1, 1, 1}, 0.5);
  auto loss = sum_all(mul(p, g));
  backward(loss, store);
  OptimizerConfig cfg;
  cfg.lr = 0.1;
  adam_step(store, cfg);
  const double expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-7);
  EXPECT_NEAR(p.values()[0], expected, 1e-12);
}

TEST(Adam, TwoStepTraceMatchesHandComputation) {
  const double g = 0.3, lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-7;
  ParameterStore<double> store;
  auto p = store.create("p", Shape{1, 1, 1, 1}, {1.0});
  OptimizerConfig cfg;
  cfg.lr = lr;

  // hand trace, computed independently
  double m = 0, v = 0, theta = 1.0;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    theta -= lr * mh / (std::sqrt(vh) + eps);
  }

  for (int t = 0; t < 2; ++t) {
    auto loss = sum_all(mul(p, Tensor<double>::constant(Shape{1, 1, 1, 1}, g)));
    backward(loss, store);
    adam_step(store, cfg);
    store.zero_grads();
  }
  EXPECT_NEAR(p.values()[0], theta, 1e-9);
  EXPECT_EQ(store.step_count(), 2);
}

TEST(Adam, MissingGradientIsAnError) {
  ParameterStore<float> store;
  store.create("p", Shape{1, 1, 1, 1}, {1.0f});
  OptimizerConfig cfg;
  EXPECT_THROW(adam_step(store, cfg), Error);
}

TEST(Adam, GradsAreLeftUntouched) {
  ParameterStore<double> store;
  auto p = store.create("p", Shape{1, 1, 1, 1}, {1.0});
  auto loss = sum_all(mul(p, Tensor<double>::constant(Shape{1, 1, 1, 1}, 2.0)));
  backward(loss, store);
  OptimizerConfig cfg;
  adam_step(store, cfg);
  EXPECT_DOUBLE_EQ(p.grad()[0], 2.0);
  store.zero_grads();
  EXPECT_DOUBLE_EQ(p.grad()[0], 0.0);
}

TEST(ParameterStore, CloneIsDeep) {
  ParameterStore<float> store;
  auto p = store.create("p", Shape{1, 1, 1, 1}, {1.0f});
  auto copy = store.clone();
  p.mutable_values()[0] = 9.0f;
  EXPECT_EQ(copy.get("p").values()[0], 1.0f);
  EXPECT_EQ(store.get("p").values()[0], 9.0f);
}

TEST(OptimizerConfig, Validation) {
  OptimizerConfig bad;
  bad.lr = 0;
  EXPECT_THROW(bad.validate(), Error);
  OptimizerConfig defaults;
  EXPECT_DOUBLE_EQ(defaults.beta1, 0.9);
  EXPECT_DOUBLE_EQ(defaults.beta2, 0.999);
  EXPECT_DOUBLE_EQ(defaults.epsilon, 1e-7);
  defaults.validate();
}
