// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "lidarflow/tensor.hpp"

namespace lidarflow {

struct Point {
  float x = 0, y = 0, z = 0;
  float intensity = 0;  // parsed but unused downstream
};

struct ProjectionConfig {
  int width = 1024;
  int height = 64;
  double fov_up_deg = 3.0;     // signed, above horizon positive
  double fov_down_deg = -25.0; // signed, below horizon negative
  double max_range = 85.0;     // meters

  double fov_deg() const { return std::abs(fov_down_deg) + std::abs(fov_up_deg); }

  void validate() const {
    if (width < 2 || height < 2) fail("ProjectionConfig: width and height must be >= 2");
    if (!(fov_deg() > 0)) fail("ProjectionConfig: vertical field of view must be positive");
    if (!(max_range > 0)) fail("ProjectionConfig: max_range must be positive");
  }

  /// Stable fingerprint used to key the projected-image cache.
  std::uint64_t fingerprint() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "w=%d;h=%d;up=%.9g;down=%.9g;max=%.9g", width, height,
                  fov_up_deg, fov_down_deg, max_range);
    return fnv1a64(std::string_view(buf));
  }
};

/// h x w grid of ranges in meters; 0 marks a pixel without a return.
struct RangeImage {
  int h = 0, w = 0;
  std::vector<float> ranges;  // row-major, meters

  float at(int y, int x) const { return ranges[static_cast<std::size_t>(y) * w + x]; }
  float& at(int y, int x) { return ranges[static_cast<std::size_t>(y) * w + x]; }
  bool occupied(int y, int x) const { return at(y, x) > 0.0f; }

  std::vector<std::uint8_t> occupancy() const {
    std::vector<std::uint8_t> occ(ranges.size());
    for (std::size_t i = 0; i < ranges.size(); ++i) occ[i] = ranges[i] > 0.0f ? 1 : 0;
    return occ;
  }

  double occupancy_fraction() const {
    if (ranges.empty()) return 0;
    std::size_t filled = 0;
    for (float r : ranges)
      if (r > 0.0f) ++filled;
    return static_cast<double>(filled) / static_cast<double>(ranges.size());
  }
};

/// Spherical projection of a point cloud to a range image.
///
///   u = 0.5 (1 - atan2(y, x) / pi) w
///   v = (1 - (pitch + |fov_down|) / fov) h
///
/// with pitch = asin(z / rho). Pixel indices are floored then clamped to the
/// grid. Points outside [fov_down, fov_up] or farther than max_range are
/// dropped; when several points land on one pixel the nearest return wins.
inline RangeImage project_cloud(const std::vector<Point>& points, const ProjectionConfig& cfg) {
  cfg.validate();
  RangeImage img;
  img.h = cfg.height;
  img.w = cfg.width;
  img.ranges.assign(static_cast<std::size_t>(cfg.height) * cfg.width, 0.0f);

  const double fov = cfg.fov_deg();
  const double down_abs = std::abs(cfg.fov_down_deg);
  const double rad2deg = 180.0 / std::numbers::pi;

  for (const Point& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) continue;
    const double rho = std::sqrt(static_cast<double>(p.x) * p.x +
                                 static_cast<double>(p.y) * p.y +
                                 static_cast<double>(p.z) * p.z);
    if (!(rho > 0) || rho > cfg.max_range) continue;
    const double pitch_deg = std::asin(static_cast<double>(p.z) / rho) * rad2deg;
    if (pitch_deg < cfg.fov_down_deg || pitch_deg > cfg.fov_up_deg) continue;

    const double yaw = std::atan2(static_cast<double>(p.y), static_cast<double>(p.x));
    const double uf = 0.5 * (1.0 - yaw / std::numbers::pi) * cfg.width;
    const double vf = (1.0 - (pitch_deg + down_abs) / fov) * cfg.height;
    int u = static_cast<int>(std::floor(uf));
    int v = static_cast<int>(std::floor(vf));
    u = std::clamp(u, 0, cfg.width - 1);
    v = std::clamp(v, 0, cfg.height - 1);

    float& cell = img.at(v, u);
    const float r = static_cast<float>(rho);
    if (cell == 0.0f || r < cell) cell = r;
  }
  return img;
}

/// Network input conditioning: ranges scaled to [0, 1], empty pixels stay 0.
template <typename S = float>
Tensor<S> normalize(const RangeImage& img, const ProjectionConfig& cfg) {
  cfg.validate();
  std::vector<S> values(img.ranges.size());
  const double inv = 1.0 / cfg.max_range;
  for (std::size_t i = 0; i < img.ranges.size(); ++i)
    values[i] = static_cast<S>(img.ranges[i] * inv);
  return Tensor<S>::constant(Shape{1, 1, img.h, img.w}, std::move(values));
}

}  // namespace lidarflow
