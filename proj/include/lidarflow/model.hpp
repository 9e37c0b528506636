// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lidarflow/ops.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

/// Architecture constants. The estimator and context network are shared
/// across pyramid levels; per-level 1x1 adapters reconcile the varying
/// pyramid widths with the shared estimator's fixed input width.
struct ModelConfig {
  std::array<int, 7> pyramid_channels{1, 16, 32, 64, 96, 128, 192};
  std::array<int, 6> estimator_channels{128, 128, 96, 64, 32, 2};
  std::array<int, 7> context_dilations{1, 2, 4, 8, 16, 1, 1};
  std::array<int, 7> context_channels{128, 128, 128, 96, 64, 32, 2};
  int cost_radius = 4;
  int adapter_channels = 32;
  int cbam_reduction = 16;
  float leaky_slope = 0.1f;
  bool use_cbam = true;
  bool context_every_level = true;

  int cost_channels() const { return (2 * cost_radius + 1) * (2 * cost_radius + 1); }
  int estimator_input_channels() const { return cost_channels() + adapter_channels + 2; }

  void validate() const {
    if (pyramid_channels[0] != 1) fail("ModelConfig: level-1 channel count must be 1");
    if (estimator_channels.back() != 2) fail("ModelConfig: estimator must output 2 channels");
    if (context_channels.back() != 2) fail("ModelConfig: context network must output 2 channels");
    if (cost_radius < 1) fail("ModelConfig: cost_radius must be positive");
    if (adapter_channels < 1) fail("ModelConfig: adapter_channels must be positive");
    if (cbam_reduction < 1) fail("ModelConfig: cbam_reduction must be positive");
  }

  std::uint64_t fingerprint() const {
    std::string s = "v1";
    auto append = [&s](long long v) { s += ":" + std::to_string(v); };
    for (int v : pyramid_channels) append(v);
    for (int v : estimator_channels) append(v);
    for (int v : context_dilations) append(v);
    for (int v : context_channels) append(v);
    append(cost_radius);
    append(adapter_channels);
    append(cbam_reduction);
    append(static_cast<long long>(leaky_slope * 1e6));
    append(use_cbam ? 1 : 0);
    append(context_every_level ? 1 : 0);
    return fnv1a64(s);
  }

  /// Narrow variant with the same topology, for fast end-to-end checks.
  static ModelConfig compact() {
    ModelConfig cfg;
    cfg.pyramid_channels = {1, 4, 8, 12, 16, 20, 24};
    cfg.estimator_channels = {16, 16, 12, 8, 8, 2};
    cfg.context_channels = {16, 16, 16, 12, 8, 8, 2};
    cfg.cost_radius = 2;
    cfg.adapter_channels = 8;
    cfg.cbam_reduction = 4;
    return cfg;
  }
};

namespace detail {

template <typename S>
Tensor<S> create_conv(ParameterStore<S>& store, const std::string& prefix, int out_ch, int in_ch,
                      int kh, int kw, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch) * kh * kw);
  std::vector<S> w(static_cast<std::size_t>(out_ch) * in_ch * kh * kw);
  for (auto& v : w) v = static_cast<S>(rng.uniform(-bound, bound));
  store.create(prefix + ".weight", Shape{out_ch, in_ch, kh, kw}, std::move(w));
  store.create(prefix + ".bias", Shape{1, out_ch, 1, 1},
               std::vector<S>(static_cast<std::size_t>(out_ch), S(0)));
  return store.get(prefix + ".weight");
}

template <typename S>
Tensor<S> apply_conv(const ParameterStore<S>& store, const std::string& prefix,
                     const Tensor<S>& x, int stride, int padding, int dilation = 1) {
  return conv2d(x, store.get(prefix + ".weight"), store.get(prefix + ".bias"), stride, padding,
                dilation);
}

inline int cbam_hidden(int channels, int reduction) {
  return std::max(1, channels / reduction);
}

}  // namespace detail

/// Creates every learnable tensor. Weights draw from a fan-in-scaled uniform
/// distribution; biases start at zero. Creation order is fixed so a seed
/// fully determines the initialization.
template <typename S>
void init_model_params(ParameterStore<S>& store, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);

  for (int level = 2; level <= 7; ++level) {
    const int in_ch = cfg.pyramid_channels[level - 2];
    const int out_ch = cfg.pyramid_channels[level - 1];
    const std::string base = "pyramid.l" + std::to_string(level);
    detail::create_conv(store, base + ".conv1", out_ch, in_ch, 3, 3, rng);
    detail::create_conv(store, base + ".conv2", out_ch, out_ch, 3, 3, rng);
  }

  if (cfg.use_cbam) {
    for (int level = 2; level <= 7; ++level) {
      const int ch = cfg.pyramid_channels[level - 1];
      const int hidden = detail::cbam_hidden(ch, cfg.cbam_reduction);
      const std::string base = "cbam.l" + std::to_string(level);
      detail::create_conv(store, base + ".mlp.fc1", hidden, ch, 1, 1, rng);
      detail::create_conv(store, base + ".mlp.fc2", ch, hidden, 1, 1, rng);
      detail::create_conv(store, base + ".spatial", 1, 2, 7, 7, rng);
    }
  }

  for (int level = 2; level <= 7; ++level) {
    const int ch = cfg.pyramid_channels[level - 1];
    detail::create_conv(store, "adapter.l" + std::to_string(level), cfg.adapter_channels, ch, 1,
                        1, rng);
  }

  // Shared flow estimator. Layer 1 sees the cost volume + adapted features +
  // upsampled flow; each later layer sees the previous two layer outputs.
  {
    const auto& ch = cfg.estimator_channels;
    const std::array<int, 6> in_ch = {cfg.estimator_input_channels(),
                                      ch[0],
                                      ch[0] + ch[1],
                                      ch[1] + ch[2],
                                      ch[2] + ch[3],
                                      ch[3] + ch[4]};
    for (int i = 0; i < 6; ++i)
      detail::create_conv(store, "estimator.conv" + std::to_string(i + 1), ch[i], in_ch[i], 3, 3,
                          rng);
  }

  {
    const auto& ch = cfg.context_channels;
    int in_ch = cfg.estimator_channels[4] + 2;
    for (int i = 0; i < 7; ++i) {
      detail::create_conv(store, "context.conv" + std::to_string(i + 1), ch[i], in_ch, 3, 3, rng);
      in_ch = ch[i];
    }
  }
}

template <typename S>
std::int64_t param_count(const ParameterStore<S>& store) {
  return store.param_count();
}

/// Six feature tensors for levels 2..7 (index level-2). Each level halves
/// the spatial extents: stride-2 conv, leaky ReLU, stride-1 conv, leaky ReLU.
template <typename S>
std::vector<Tensor<S>> pyramid_forward(const Tensor<S>& image, const ParameterStore<S>& store,
                                       const ModelConfig& cfg) {
  const Shape& s = image.shape();
  if (s.c != 1)
    fail("pyramid_forward: expected a single-channel image, got " + s.to_string());
  if (s.h % 64 != 0 || s.w % 64 != 0)
    fail("pyramid_forward: input " + s.to_string() +
         " must have height and width divisible by 64; pad the image first");
  std::vector<Tensor<S>> features;
  features.reserve(6);
  Tensor<S> x = image;
  for (int level = 2; level <= 7; ++level) {
    const std::string base = "pyramid.l" + std::to_string(level);
    x = leaky_relu(detail::apply_conv(store, base + ".conv1", x, 2, 1),
                   static_cast<S>(cfg.leaky_slope));
    x = leaky_relu(detail::apply_conv(store, base + ".conv2", x, 1, 1),
                   static_cast<S>(cfg.leaky_slope));
    features.push_back(x);
  }
  return features;
}

template <typename S>
struct CbamDetail {
  Tensor<S> refined;
  Tensor<S> channel_gate;  // (N,C,1,1), strictly inside (0,1)
  Tensor<S> spatial_gate;  // (N,1,H,W), strictly inside (0,1)
};

/// Channel then spatial attention. The two-layer channel MLP is shared
/// between the average- and max-pooled descriptors; the spatial branch is a
/// 7x7 convolution over the stacked channel-avg / channel-max planes.
template <typename S>
CbamDetail<S> cbam_forward_detail(const Tensor<S>& x, const ParameterStore<S>& store, int level,
                                  const ModelConfig& cfg) {
  const std::string base = "cbam.l" + std::to_string(level);
  const S slope = static_cast<S>(cfg.leaky_slope);

  auto mlp = [&](const Tensor<S>& pooled) {
    Tensor<S> h = leaky_relu(detail::apply_conv(store, base + ".mlp.fc1", pooled, 1, 0), slope);
    return detail::apply_conv(store, base + ".mlp.fc2", h, 1, 0);
  };
  Tensor<S> channel_gate = sigmoid(add(mlp(pool(x, PoolAxis::Spatial, PoolKind::Avg)),
                                       mlp(pool(x, PoolAxis::Spatial, PoolKind::Max))));
  Tensor<S> refined = mul(x, channel_gate);

  Tensor<S> stacked = concat_channels(pool(refined, PoolAxis::Channel, PoolKind::Avg),
                                      pool(refined, PoolAxis::Channel, PoolKind::Max));
  Tensor<S> spatial_gate = sigmoid(detail::apply_conv(store, base + ".spatial", stacked, 1, 3));
  Tensor<S> out = mul(refined, spatial_gate);
  return {out, channel_gate, spatial_gate};
}

template <typename S>
Tensor<S> cbam_forward(const Tensor<S>& x, const ParameterStore<S>& store, int level,
                       const ModelConfig& cfg) {
  return cbam_forward_detail(x, store, level, cfg).refined;
}

template <typename S>
struct CostVolumeResult {
  Tensor<S> volume;
  Tensor<S> warped;
};

/// Correlation between f1 and (optionally flow-warped) f2, passed through a
/// leaky ReLU. With no upper-level flow the plain correlation is used.
template <typename S>
CostVolumeResult<S> build_cost_volume(const Tensor<S>& f1, const Tensor<S>& f2,
                                      const Tensor<S>* up_flow, const ModelConfig& cfg) {
  Tensor<S> warped = up_flow ? backwarp(f2, *up_flow) : f2;
  Tensor<S> volume =
      leaky_relu(correlation(f1, warped, cfg.cost_radius), static_cast<S>(cfg.leaky_slope));
  return {volume, warped};
}

template <typename S>
struct EstimatorResult {
  Tensor<S> flow;         // raw 2-channel prediction
  Tensor<S> penultimate;  // activation of the fifth layer
};

/// The shared six-layer estimator on an already-assembled input stack.
template <typename S>
EstimatorResult<S> estimator_core(const Tensor<S>& input, const ParameterStore<S>& store,
                                  const ModelConfig& cfg) {
  const S slope = static_cast<S>(cfg.leaky_slope);
  auto conv = [&](const Tensor<S>& x, int i) {
    return detail::apply_conv(store, "estimator.conv" + std::to_string(i), x, 1, 1);
  };
  Tensor<S> x1 = leaky_relu(conv(input, 1), slope);
  Tensor<S> x2 = leaky_relu(conv(x1, 2), slope);
  Tensor<S> x3 = leaky_relu(conv(concat_channels(x1, x2), 3), slope);
  Tensor<S> x4 = leaky_relu(conv(concat_channels(x2, x3), 4), slope);
  Tensor<S> x5 = leaky_relu(conv(concat_channels(x3, x4), 5), slope);
  Tensor<S> flow = conv(concat_channels(x4, x5), 6);
  return {flow, x5};
}

/// Adapter conv to the shared width, then the shared estimator. An absent
/// upper-level flow is replaced by a zero flow so the input width is fixed.
template <typename S>
EstimatorResult<S> estimate_flow_level(const Tensor<S>& f1, const Tensor<S>& cv,
                                       const Tensor<S>* up_flow, const ParameterStore<S>& store,
                                       int level, const ModelConfig& cfg) {
  const Shape& s = f1.shape();
  Tensor<S> adapted = leaky_relu(
      detail::apply_conv(store, "adapter.l" + std::to_string(level), f1, 1, 0),
      static_cast<S>(cfg.leaky_slope));
  Tensor<S> flow_in =
      up_flow ? *up_flow : Tensor<S>::constant(Shape{s.n, 2, s.h, s.w}, S(0));
  Tensor<S> stacked = concat_channels(std::vector<Tensor<S>>{cv, adapted, flow_in});
  return estimator_core(stacked, store, cfg);
}

/// Dilated refinement head; returns flow plus a learned residual.
template <typename S>
Tensor<S> context_refine(const Tensor<S>& penult, const Tensor<S>& flow,
                         const ParameterStore<S>& store, const ModelConfig& cfg) {
  if (penult.shape().h != flow.shape().h || penult.shape().w != flow.shape().w ||
      penult.shape().n != flow.shape().n)
    fail("context_refine: penultimate " + penult.shape().to_string() + " and flow " +
         flow.shape().to_string() + " must share extents");
  const S slope = static_cast<S>(cfg.leaky_slope);
  Tensor<S> x = concat_channels(penult, flow);
  for (int i = 0; i < 7; ++i) {
    const int dil = cfg.context_dilations[i];
    x = detail::apply_conv(store, "context.conv" + std::to_string(i + 1), x, 1, dil, dil);
    if (i < 6) x = leaky_relu(x, slope);
  }
  return add(flow, x);
}

/// Flow fields for levels 1..7, index level-1, each in its own level's pixel
/// units.
template <typename S>
using FlowLevels = std::array<Tensor<S>, 7>;

/// Full coarse-to-fine pass: features, CBAM refinement, warped cost volume,
/// shared estimator, context refinement, then a final 2x upsample from level
/// 2 to level 1. Flow values double at each upsample so displacements stay
/// in current-level pixels.
template <typename S>
FlowLevels<S> model_forward(const Tensor<S>& I1, const Tensor<S>& I2,
                            const ParameterStore<S>& store, const ModelConfig& cfg) {
  cfg.validate();
  if (!(I1.shape() == I2.shape()))
    fail("model_forward: frame shapes differ: " + I1.shape().to_string() + " vs " +
         I2.shape().to_string());
  auto feats1 = pyramid_forward(I1, store, cfg);
  auto feats2 = pyramid_forward(I2, store, cfg);

  FlowLevels<S> flows;
  Tensor<S> up_flow;
  for (int level = 7; level >= 2; --level) {
    Tensor<S> f1 = feats1[level - 2];
    Tensor<S> f2 = feats2[level - 2];
    if (cfg.use_cbam) {
      f1 = cbam_forward(f1, store, level, cfg);
      f2 = cbam_forward(f2, store, level, cfg);
    }
    const Tensor<S>* up = up_flow.defined() ? &up_flow : nullptr;
    auto cv = build_cost_volume(f1, f2, up, cfg);
    auto est = estimate_flow_level(f1, cv.volume, up, store, level, cfg);
    Tensor<S> flow = (cfg.context_every_level || level == 2)
                         ? context_refine(est.penultimate, est.flow, store, cfg)
                         : est.flow;
    flows[level - 1] = flow;
    if (level > 2) up_flow = scale(upsample2x(flow), 2.0);
  }
  flows[0] = scale(upsample2x(flows[1]), 2.0);
  return flows;
}

}  // namespace lidarflow
