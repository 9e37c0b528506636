// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <vector>

#include "lidarflow/dataset.hpp"
#include "lidarflow/io.hpp"
#include "lidarflow/projection.hpp"

namespace lidarflow {

/// Smooth, strictly positive pseudo range image (meters): a base level plus
/// random Gaussian bumps, clamped to a plausible range band. Every pixel is
/// occupied so synthetic pairs exercise the photometric loss densely.
inline RangeImage synthetic_range_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  RangeImage img;
  img.h = h;
  img.w = w;
  img.ranges.assign(static_cast<std::size_t>(h) * w, 30.0f);
  const int bumps = 40;
  for (int b = 0; b < bumps; ++b) {
    const double cx = rng.uniform(0, w);
    const double cy = rng.uniform(0, h);
    const double amp = rng.uniform(-20.0, 20.0);
    const double sigma = rng.uniform(2.0, 10.0);
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        // wrap horizontally so circular shifts stay seamless
        double dx = std::abs(x - cx);
        dx = std::min(dx, w - dx);
        const double dy = y - cy;
        img.at(y, x) += static_cast<float>(amp * std::exp(-(dx * dx + dy * dy) * inv2s2));
      }
  }
  for (auto& r : img.ranges) r = std::clamp(r, 2.0f, 80.0f);
  return img;
}

/// Circular shift right by dx columns: out(x) = in((x - dx) mod w).
inline RangeImage shift_columns(const RangeImage& in, int dx) {
  RangeImage out;
  out.h = in.h;
  out.w = in.w;
  out.ranges.resize(in.ranges.size());
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      int sx = (x - dx) % in.w;
      if (sx < 0) sx += in.w;
      out.at(y, x) = in.at(y, sx);
    }
  return out;
}

/// Pairs related by a uniform +dx px horizontal shift (frame 2 is frame 1
/// shifted right, so the forward flow from frame 1 to frame 2 is u = +dx).
inline std::vector<FramePair> make_shift_pairs(int count, int h, int w, int dx,
                                               std::uint64_t seed) {
  std::vector<FramePair> pairs;
  pairs.reserve(count);
  for (int i = 0; i < count; ++i) {
    FramePair p;
    p.first = synthetic_range_image(h, w, seed + 1000 * i);
    p.second = shift_columns(p.first, dx);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Ray-cast surrogate sequences in the KITTI odometry directory layout, for
// end-to-end pipeline runs where no real dataset is available.

struct SurrogateParams {
  ProjectionConfig projection{256, 64, 3.0, -25.0, 85.0};
  double yaw_step_deg = 2.0;      // sensor rotation per frame
  double forward_step_m = 0.35;   // sensor translation per frame
  double sensor_height_m = 1.7;
  double range_noise_m = 0.02;
  double dropout = 0.02;          // fraction of rays without a return
  int boxes = 24;
  int cylinders = 28;
};

namespace detail {

struct Box {
  double x0, x1, y0, y1, z0, z1;
};

struct Cylinder {
  double cx, cy, radius, height;
};

struct SurrogateScene {
  std::vector<Box> boxes;
  std::vector<Cylinder> cylinders;
};

inline SurrogateScene make_scene(const SurrogateParams& p, Rng& rng) {
  SurrogateScene scene;
  for (int i = 0; i < p.boxes; ++i) {
    const double dist = rng.uniform(8.0, 60.0);
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double cx = dist * std::cos(ang);
    const double cy = dist * std::sin(ang);
    const double sx = rng.uniform(1.0, 12.0);
    const double sy = rng.uniform(1.0, 12.0);
    const double sz = rng.uniform(1.0, 6.0);
    scene.boxes.push_back({cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2, 0.0, sz});
  }
  for (int i = 0; i < p.cylinders; ++i) {
    const double dist = rng.uniform(4.0, 50.0);
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    scene.cylinders.push_back({dist * std::cos(ang), dist * std::sin(ang),
                               rng.uniform(0.15, 0.8), rng.uniform(2.0, 8.0)});
  }
  // two long walls flanking the corridor of motion
  scene.boxes.push_back({-200.0, 400.0, 24.0, 26.0, 0.0, 4.0});
  scene.boxes.push_back({-200.0, 400.0, -26.0, -24.0, 0.0, 3.0});
  return scene;
}

inline double ray_ground(const double o[3], const double d[3]) {
  if (d[2] >= -1e-9) return -1;
  return o[2] / (-d[2]);
}

inline double ray_box(const double o[3], const double d[3], const Box& b) {
  double tmin = 0.0, tmax = 1e18;
  const double lo[3] = {b.x0, b.y0, b.z0};
  const double hi[3] = {b.x1, b.y1, b.z1};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo[a] || o[a] > hi[a]) return -1;
      continue;
    }
    double t0 = (lo[a] - o[a]) / d[a];
    double t1 = (hi[a] - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return -1;
  }
  return tmin > 1e-9 ? tmin : -1;
}

inline double ray_cylinder(const double o[3], const double d[3], const Cylinder& c) {
  const double ox = o[0] - c.cx, oy = o[1] - c.cy;
  const double a = d[0] * d[0] + d[1] * d[1];
  if (a < 1e-12) return -1;
  const double b = 2.0 * (ox * d[0] + oy * d[1]);
  const double cc = ox * ox + oy * oy - c.radius * c.radius;
  const double disc = b * b - 4 * a * cc;
  if (disc < 0) return -1;
  const double sq = std::sqrt(disc);
  for (double t : {(-b - sq) / (2 * a), (-b + sq) / (2 * a)}) {
    if (t > 1e-9) {
      const double z = o[2] + t * d[2];
      if (z >= 0.0 && z <= c.height) return t;
    }
  }
  return -1;
}

}  // namespace detail

/// Casts one frame from the given sensor pose; returns points in the sensor
/// frame, one per pixel of the sensor's angular grid when a surface is hit.
inline std::vector<Point> cast_surrogate_frame(const detail::SurrogateScene& scene,
                                               const SurrogateParams& p, double pos_x,
                                               double pos_y, double yaw_rad, Rng& rng) {
  const ProjectionConfig& prj = p.projection;
  const double fov = prj.fov_deg();
  const double down_abs = std::abs(prj.fov_down_deg);
  const double deg2rad = std::numbers::pi / 180.0;
  const double origin[3] = {pos_x, pos_y, p.sensor_height_m};

  std::vector<Point> points;
  points.reserve(static_cast<std::size_t>(prj.width) * prj.height);
  for (int row = 0; row < prj.height; ++row) {
    const double pitch_deg = fov * (1.0 - (row + 0.5) / prj.height) - down_abs;
    const double pitch = pitch_deg * deg2rad;
    for (int col = 0; col < prj.width; ++col) {
      if (rng.uniform() < p.dropout) continue;
      const double azimuth = std::numbers::pi * (1.0 - (2.0 * col + 1.0) / prj.width);
      const double ds[3] = {std::cos(azimuth) * std::cos(pitch),
                            std::sin(azimuth) * std::cos(pitch), std::sin(pitch)};
      const double dw[3] = {ds[0] * std::cos(yaw_rad) - ds[1] * std::sin(yaw_rad),
                            ds[0] * std::sin(yaw_rad) + ds[1] * std::cos(yaw_rad), ds[2]};
      double best = detail::ray_ground(origin, dw);
      if (best < 0) best = 1e18;
      for (const auto& b : scene.boxes) {
        const double t = detail::ray_box(origin, dw, b);
        if (t > 0 && t < best) best = t;
      }
      for (const auto& c : scene.cylinders) {
        const double t = detail::ray_cylinder(origin, dw, c);
        if (t > 0 && t < best) best = t;
      }
      if (best > prj.max_range) continue;  // no return
      const double r = best + rng.uniform(-p.range_noise_m, p.range_noise_m);
      Point pt;
      pt.x = static_cast<float>(ds[0] * r);
      pt.y = static_cast<float>(ds[1] * r);
      pt.z = static_cast<float>(ds[2] * r);
      pt.intensity = static_cast<float>(rng.uniform(0.2, 0.8));
      points.push_back(pt);
    }
  }
  return points;
}

/// Writes a full sequence of surrogate scans as
/// <root>/sequences/<sequence>/velodyne/NNNNNN.bin.
inline void generate_surrogate_sequence(const std::filesystem::path& root,
                                        const std::string& sequence, int frames,
                                        const SurrogateParams& params, std::uint64_t seed) {
  Rng scene_rng(seed);
  const auto scene = detail::make_scene(params, scene_rng);
  const auto dir = sequence_velodyne_dir(root, sequence);
  std::filesystem::create_directories(dir);
  const double deg2rad = std::numbers::pi / 180.0;
  for (int f = 0; f < frames; ++f) {
    Rng frame_rng(seed ^ (0x9e3779b9ull * (f + 1)));
    const auto points = cast_surrogate_frame(scene, params, f * params.forward_step_m, 0.0,
                                             f * params.yaw_step_deg * deg2rad, frame_rng);
    detail::ByteWriter w;
    for (const Point& p : points) {
      w.f32(p.x);
      w.f32(p.y);
      w.f32(p.z);
      w.f32(p.intensity);
    }
    char name[16];
    std::snprintf(name, sizeof(name), "%06d.bin", f);
    detail::write_file(dir / name, w.bytes);
  }
}

}  // namespace lidarflow
