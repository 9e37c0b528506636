// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "lidarflow/ops.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

/// Central-difference gradient verification. The reference side only ever
/// evaluates the forward map on perturbed copies, so it stays independent of
/// the reverse-mode path it is checking.
template <typename S>
struct GradCheckOptions {
  S step = S(1e-4);
  S tolerance = S(1e-5);
  std::size_t max_elements_per_input = 0;  // 0 = check every element
  std::uint64_t seed = 0x5eed;
};

struct GradCheckReport {
  bool ok = true;
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst;

  void note(double rel, double tol, const std::string& where) {
    ++checked;
    if (rel > max_rel_error) {
      max_rel_error = rel;
      worst = where;
    }
    if (rel >= tol) ok = false;
  }
};

/// `build` maps a vector of input tensors to a scalar tensor. Analytic
/// gradients come from one reverse pass over variables; numeric gradients
/// from (f(x+h) - f(x-h)) / 2h with constant-only re-evaluation.
template <typename S, typename BuildFn>
GradCheckReport check_gradients(BuildFn&& build, const std::vector<Shape>& shapes,
                                std::vector<std::vector<S>> base_values,
                                const GradCheckOptions<S>& opt = {}) {
  if (shapes.size() != base_values.size())
    fail("check_gradients: shapes/values arity mismatch");

  std::vector<Tensor<S>> leaves;
  leaves.reserve(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i)
    leaves.push_back(Tensor<S>::variable(shapes[i], base_values[i]));
  Tensor<S> loss = build(leaves);
  backward(loss);

  auto eval = [&](const std::vector<std::vector<S>>& vals) -> double {
    std::vector<Tensor<S>> inputs;
    inputs.reserve(shapes.size());
    for (std::size_t i = 0; i < shapes.size(); ++i)
      inputs.push_back(Tensor<S>::constant(shapes[i], vals[i]));
    return static_cast<double>(build(inputs).item());
  };

  GradCheckReport report;
  Rng rng(opt.seed);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const std::size_t count = base_values[i].size();
    std::vector<std::size_t> indices(count);
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (opt.max_elements_per_input > 0 && opt.max_elements_per_input < count) {
      rng.shuffle(indices);
      indices.resize(opt.max_elements_per_input);
    }
    const auto analytic = leaves[i].grad();
    for (std::size_t j : indices) {
      const S saved = base_values[i][j];
      base_values[i][j] = saved + opt.step;
      const double plus = eval(base_values);
      base_values[i][j] = saved - opt.step;
      const double minus = eval(base_values);
      base_values[i][j] = saved;
      const double numeric = (plus - minus) / (2.0 * static_cast<double>(opt.step));
      const double ad = static_cast<double>(analytic[j]);
      const double denom = std::max({1.0, std::abs(ad), std::abs(numeric)});
      const double rel = std::abs(ad - numeric) / denom;
      report.note(rel, static_cast<double>(opt.tolerance),
                  "input " + std::to_string(i) + " element " + std::to_string(j) + " ad=" +
                      std::to_string(ad) + " fd=" + std::to_string(numeric));
    }
  }
  return report;
}

/// Convenience overload drawing base values uniformly from [-1, 1].
template <typename S, typename BuildFn>
GradCheckReport check_gradients(BuildFn&& build, const std::vector<Shape>& shapes, Rng& rng,
                                const GradCheckOptions<S>& opt = {}) {
  std::vector<std::vector<S>> values;
  values.reserve(shapes.size());
  for (const Shape& s : shapes) {
    std::vector<S> v(static_cast<std::size_t>(s.numel()));
    for (auto& x : v) x = static_cast<S>(rng.uniform(-1.0, 1.0));
    values.push_back(std::move(v));
  }
  return check_gradients<S>(std::forward<BuildFn>(build), shapes, std::move(values), opt);
}

/// Random constant projection used to turn an op output into a scalar loss
/// that exposes every output element's gradient.
template <typename S>
Tensor<S> random_projection(const Shape& shape, Rng& rng) {
  std::vector<S> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = static_cast<S>(rng.uniform(-1.0, 1.0));
  return Tensor<S>::constant(shape, std::move(v));
}

struct OpGradientResult {
  std::string op;
  GradCheckReport report;
};

/// Finite-difference verification of every differentiable op, several random
/// small instances each. Intended to run in double precision.
template <typename S>
std::vector<OpGradientResult> op_gradient_suite(int instances, std::uint64_t seed) {
  std::vector<OpGradientResult> results;
  Rng rng(seed);

  // Each instance fixes its projection seed so the loss is the same pure
  // function for the reverse pass and every finite-difference evaluation.
  auto run = [&](const std::string& name, auto&& op, std::vector<Shape> shapes) {
    GradCheckReport combined;
    for (int i = 0; i < instances; ++i) {
      const std::uint64_t projection_seed = rng.next_u64();
      auto build = [&op, projection_seed](const std::vector<Tensor<S>>& in) {
        Tensor<S> y = op(in);
        Rng local(projection_seed);
        return sum_all(mul(y, random_projection<S>(y.shape(), local)));
      };
      auto r = check_gradients<S>(build, shapes, rng, {});
      combined.checked += r.checked;
      if (r.max_rel_error > combined.max_rel_error) {
        combined.max_rel_error = r.max_rel_error;
        combined.worst = r.worst;
      }
      combined.ok = combined.ok && r.ok;
    }
    results.push_back({name, combined});
  };

  run("conv2d(stride1,pad1)",
      [](const std::vector<Tensor<S>>& in) { return conv2d(in[0], in[1], in[2], 1, 1, 1); },
      {Shape{2, 3, 5, 6}, Shape{4, 3, 3, 3}, Shape{1, 4, 1, 1}});
  run("conv2d(stride2,pad0)",
      [](const std::vector<Tensor<S>>& in) { return conv2d(in[0], in[1], in[2], 2, 0, 1); },
      {Shape{1, 2, 7, 8}, Shape{3, 2, 3, 3}, Shape{1, 3, 1, 1}});
  run("conv2d(dilation2,pad2)",
      [](const std::vector<Tensor<S>>& in) { return conv2d(in[0], in[1], in[2], 1, 2, 2); },
      {Shape{2, 3, 8, 8}, Shape{2, 3, 3, 3}, Shape{1, 2, 1, 1}});
  run("leaky_relu", [](const std::vector<Tensor<S>>& in) { return leaky_relu(in[0]); },
      {Shape{2, 3, 4, 5}});
  run("sigmoid", [](const std::vector<Tensor<S>>& in) { return sigmoid(in[0]); },
      {Shape{2, 3, 4, 5}});
  run("pool(spatial,avg)",
      [](const std::vector<Tensor<S>>& in) {
        return pool(in[0], PoolAxis::Spatial, PoolKind::Avg);
      },
      {Shape{2, 3, 4, 5}});
  run("pool(spatial,max)",
      [](const std::vector<Tensor<S>>& in) {
        return pool(in[0], PoolAxis::Spatial, PoolKind::Max);
      },
      {Shape{2, 3, 4, 5}});
  run("pool(channel,avg)",
      [](const std::vector<Tensor<S>>& in) {
        return pool(in[0], PoolAxis::Channel, PoolKind::Avg);
      },
      {Shape{2, 5, 3, 4}});
  run("pool(channel,max)",
      [](const std::vector<Tensor<S>>& in) {
        return pool(in[0], PoolAxis::Channel, PoolKind::Max);
      },
      {Shape{2, 5, 3, 4}});
  run("avg_pool2x2", [](const std::vector<Tensor<S>>& in) { return avg_pool2x2(in[0]); },
      {Shape{2, 3, 4, 6}});
  run("upsample2x", [](const std::vector<Tensor<S>>& in) { return upsample2x(in[0]); },
      {Shape{2, 2, 3, 4}});
  run("backwarp", [](const std::vector<Tensor<S>>& in) { return backwarp(in[0], in[1]); },
      {Shape{1, 3, 5, 6}, Shape{1, 2, 5, 6}});
  run("correlation",
      [](const std::vector<Tensor<S>>& in) { return correlation(in[0], in[1], 2); },
      {Shape{1, 4, 6, 7}, Shape{1, 4, 6, 7}});
  run("add", [](const std::vector<Tensor<S>>& in) { return add(in[0], in[1]); },
      {Shape{2, 3, 4, 5}, Shape{2, 3, 4, 5}});
  run("sub", [](const std::vector<Tensor<S>>& in) { return sub(in[0], in[1]); },
      {Shape{2, 3, 4, 5}, Shape{2, 3, 4, 5}});
  run("mul(broadcast channel gate)",
      [](const std::vector<Tensor<S>>& in) { return mul(in[0], in[1]); },
      {Shape{2, 4, 3, 5}, Shape{2, 4, 1, 1}});
  run("mul(broadcast spatial gate)",
      [](const std::vector<Tensor<S>>& in) { return mul(in[0], in[1]); },
      {Shape{2, 4, 3, 5}, Shape{2, 1, 3, 5}});
  run("scale", [](const std::vector<Tensor<S>>& in) { return scale(in[0], 2.0); },
      {Shape{2, 3, 4, 5}});
  run("concat_channels",
      [](const std::vector<Tensor<S>>& in) { return concat_channels(in[0], in[1]); },
      {Shape{2, 3, 4, 5}, Shape{2, 2, 4, 5}});
  run("sum_all", [](const std::vector<Tensor<S>>& in) { return sum_all(in[0]); },
      {Shape{2, 3, 4, 5}});
  run("mean_all", [](const std::vector<Tensor<S>>& in) { return mean_all(in[0]); },
      {Shape{2, 3, 4, 5}});
  run("sqrt(shifted positive)",
      [](const std::vector<Tensor<S>>& in) {
        auto shifted = add(mul(in[0], in[0]), Tensor<S>::constant(in[0].shape(), S(0.5)));
        return lidarflow::sqrt(shifted);
      },
      {Shape{2, 3, 4, 5}});

  return results;
}

}  // namespace lidarflow
