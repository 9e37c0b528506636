// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lidarflow/dataset.hpp"
#include "lidarflow/loss.hpp"
#include "lidarflow/model.hpp"
#include "lidarflow/training.hpp"

namespace lidarflow {

/// L1 reconstruction metric in meters, averaged over occupied reference
/// pixels, next to the zero-flow identity baseline on the same pixels.
struct EvalReport {
  std::vector<double> per_frame_l1;
  double mean_l1 = 0;
  double baseline_mean_l1 = 0;
  std::int64_t parameter_count = 0;
  std::size_t frame_count = 0;
};

/// `flow_fn(first, second)` must return the full-resolution (1,2,H,W) flow
/// from the first to the second frame.
template <typename FlowFn>
EvalReport eval_l1(FlowFn&& flow_fn, const PairDataset& testset, std::int64_t parameter_count) {
  if (testset.size() == 0) fail("eval_l1: test set is empty");
  EvalReport report;
  report.parameter_count = parameter_count;
  const float max_range = testset.max_range();

  double baseline_total = 0;
  for (std::size_t i = 0; i < testset.size(); ++i) {
    const FramePair pair = testset.at(i);
    const RangeImage& ref = pair.first;
    const RangeImage& tgt = pair.second;
    if (ref.h != tgt.h || ref.w != tgt.w)
      fail("eval_l1: frame extents differ within pair " + std::to_string(i));

    Tensor<float> flow = flow_fn(ref, tgt);
    const Shape& fs = flow.shape();
    if (fs.n != 1 || fs.c != 2 || fs.h != ref.h || fs.w != ref.w)
      fail("eval_l1: flow shape " + fs.to_string() + " does not match frames");

    // model and baseline share one normalized pipeline, so a zero-flow model
    // reproduces the identity baseline exactly
    auto I1 = stack_frames<float>({&ref}, max_range);
    auto I2 = stack_frames<float>({&tgt}, max_range);
    Tensor<float> recon = backwarp(I2, flow);

    double err = 0, base = 0;
    std::size_t occupied = 0;
    for (int y = 0; y < ref.h; ++y)
      for (int x = 0; x < ref.w; ++x) {
        if (!ref.occupied(y, x)) continue;
        ++occupied;
        const double ref_n = I1.value_at(0, 0, y, x);
        err += std::abs(static_cast<double>(recon.value_at(0, 0, y, x)) - ref_n) * max_range;
        base += std::abs(static_cast<double>(I2.value_at(0, 0, y, x)) - ref_n) * max_range;
      }
    const double frame_l1 = occupied ? err / static_cast<double>(occupied) : 0.0;
    const double frame_base = occupied ? base / static_cast<double>(occupied) : 0.0;
    report.per_frame_l1.push_back(frame_l1);
    baseline_total += frame_base;
  }

  report.frame_count = report.per_frame_l1.size();
  double total = 0;
  for (double v : report.per_frame_l1) total += v;
  report.mean_l1 = total / static_cast<double>(report.frame_count);
  report.baseline_mean_l1 = baseline_total / static_cast<double>(report.frame_count);
  return report;
}

/// Full-resolution forward flow for one frame pair.
inline Tensor<float> infer_flow(const RangeImage& first, const RangeImage& second,
                                const ParameterStore<float>& params, const ModelConfig& cfg,
                                float max_range) {
  if (first.h != second.h || first.w != second.w)
    fail("infer: frame extents differ: " + std::to_string(first.h) + "x" +
         std::to_string(first.w) + " vs " + std::to_string(second.h) + "x" +
         std::to_string(second.w));
  auto I1 = stack_frames<float>({&first}, max_range);
  auto I2 = stack_frames<float>({&second}, max_range);
  auto flows = model_forward(I1, I2, params, cfg);
  return flows[0];
}

/// Mean |u| or mean u statistics over occupied reference pixels; used by the
/// synthetic sanity checks.
struct FlowStats {
  double mean_u = 0;
  double mean_v = 0;
  double mean_abs_u = 0;
  double mean_abs_v = 0;
  std::size_t pixels = 0;
};

inline FlowStats flow_stats_over_occupied(const Tensor<float>& flow, const RangeImage& ref) {
  FlowStats stats;
  const Shape& s = flow.shape();
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      if (!ref.occupied(y, x)) continue;
      const double u = flow.value_at(0, 0, y, x);
      const double v = flow.value_at(0, 1, y, x);
      stats.mean_u += u;
      stats.mean_v += v;
      stats.mean_abs_u += std::abs(u);
      stats.mean_abs_v += std::abs(v);
      ++stats.pixels;
    }
  if (stats.pixels) {
    const double inv = 1.0 / static_cast<double>(stats.pixels);
    stats.mean_u *= inv;
    stats.mean_v *= inv;
    stats.mean_abs_u *= inv;
    stats.mean_abs_v *= inv;
  }
  return stats;
}

}  // namespace lidarflow
