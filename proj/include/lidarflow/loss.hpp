// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>

#include "lidarflow/model.hpp"
#include "lidarflow/ops.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

struct LossWeights {
  std::array<double, 7> alpha{0.3, 0.06, 0.08, 0.1, 0.12, 0.14, 0.2};  // levels 1..7
  double gamma = 1e-6;

  /// Reading of the per-level norm: root-mean-square keeps the alphas
  /// resolution-independent across levels; Euclidean is the unnormalized sum.
  enum class Norm { RootMeanSquare, Euclidean };
  Norm norm = Norm::RootMeanSquare;

  /// Fine-tune masking: MaskedMean averages the squared residual over
  /// mask-active pixels only; FullMean keeps the literal all-pixel mean.
  enum class MaskMode { MaskedMean, FullMean };
  MaskMode mask_mode = MaskMode::MaskedMean;

  void validate() const {
    for (double a : alpha)
      if (!(a > 0)) fail("LossWeights: alphas must be positive");
    if (gamma < 0) fail("LossWeights: gamma must be non-negative");
  }
};

/// Level 1 is the input; each coarser level is a 2x2 average pooling of the
/// previous one. Index level-1.
template <typename S>
std::array<Tensor<S>, 7> image_pyramid(const Tensor<S>& image) {
  const Shape& s = image.shape();
  if (s.h % 64 != 0 || s.w % 64 != 0)
    fail("image_pyramid: extents " + s.to_string() + " must be divisible by 64");
  std::array<Tensor<S>, 7> levels;
  levels[0] = image;
  for (int l = 1; l < 7; ++l) levels[l] = avg_pool2x2(levels[l - 1]);
  return levels;
}

/// Binary existence map from a (downsampled) reference image: 1 where a
/// return is present. Produced as a constant; thresholding carries no
/// gradient.
template <typename S>
Tensor<S> binary_mask(const Tensor<S>& reference_level) {
  std::vector<S> mask(static_cast<std::size_t>(reference_level.numel()));
  const auto vals = reference_level.values();
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = vals[i] > S(0) ? S(1) : S(0);
  return Tensor<S>::constant(reference_level.shape(), std::move(mask));
}

/// Reconstruction of the reference frame by backward-warping the target.
template <typename S>
Tensor<S> reconstruct(const Tensor<S>& target_level, const Tensor<S>& flow_level) {
  return backwarp(target_level, flow_level);
}

namespace detail {

template <typename S>
void require_levels(const FlowLevels<S>& flows, const char* who) {
  for (int l = 0; l < 7; ++l)
    if (!flows[l].defined())
      fail(std::string(who) + ": missing flow for level " + std::to_string(l + 1));
}

template <typename S>
Tensor<S> level_norm(const Tensor<S>& residual, const LossWeights& w, double denom) {
  Tensor<S> sq = sum_all(mul(residual, residual));
  if (w.norm == LossWeights::Norm::RootMeanSquare)
    sq = scale(sq, 1.0 / denom);
  return sqrt(sq);
}

}  // namespace detail

/// Multi-scale photometric loss: sum over levels of alpha_l times the norm of
/// (reconstructed - reference).
template <typename S>
Tensor<S> training_loss(const FlowLevels<S>& flows, const Tensor<S>& I1, const Tensor<S>& I2,
                        const LossWeights& w) {
  w.validate();
  detail::require_levels(flows, "training_loss");
  auto pyr1 = image_pyramid(I1);
  auto pyr2 = image_pyramid(I2);
  Tensor<S> total;
  for (int l = 0; l < 7; ++l) {
    Tensor<S> recon = reconstruct(pyr2[l], flows[l]);
    Tensor<S> residual = sub(recon, pyr1[l]);
    Tensor<S> term = detail::level_norm(residual, w, static_cast<double>(residual.numel()));
    term = scale(term, w.alpha[l]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

/// Fine-tuning loss: the warped target is gated by the existence mask of the
/// reference level, the per-level mean runs over mask-active pixels (empty
/// mask contributes zero), and the weight vector norm is added with factor
/// gamma.
template <typename S>
Tensor<S> finetune_loss(const FlowLevels<S>& flows, const Tensor<S>& I1, const Tensor<S>& I2,
                        const LossWeights& w, const ParameterStore<S>& params) {
  w.validate();
  detail::require_levels(flows, "finetune_loss");
  auto pyr1 = image_pyramid(I1);
  auto pyr2 = image_pyramid(I2);
  Tensor<S> total;
  for (int l = 0; l < 7; ++l) {
    Tensor<S> mask = binary_mask(pyr1[l]);
    double active = 0;
    for (S v : mask.values()) active += static_cast<double>(v);
    if (active == 0) continue;  // empty reference level contributes nothing
    Tensor<S> gated = mul(backwarp(pyr2[l], flows[l]), mask);
    Tensor<S> residual = sub(gated, pyr1[l]);
    const double denom =
        w.mask_mode == LossWeights::MaskMode::MaskedMean ? active
                                                         : static_cast<double>(residual.numel());
    Tensor<S> term = scale(detail::level_norm(residual, w, denom), w.alpha[l]);
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) total = Tensor<S>::constant(Shape{1, 1, 1, 1}, S(0));

  if (w.gamma > 0 && params.size() > 0) {
    Tensor<S> sumsq;
    params.for_each([&](const std::string&, const Tensor<S>& p) {
      Tensor<S> s = sum_all(mul(p, p));
      sumsq = sumsq.defined() ? add(sumsq, s) : s;
    });
    total = add(total, scale(sqrt(sumsq), w.gamma));
  }
  return total;
}

}  // namespace lidarflow
