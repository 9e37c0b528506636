// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lidarflow/common.hpp"
#include "lidarflow/projection.hpp"

using namespace lidarflow;

namespace {

ProjectionConfig default_cfg() { return ProjectionConfig{}; }

int pixel_u(const RangeImage& img, float value) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      if (img.at(y, x) == value) return x;
  return -1;
}

int occupied_row(const RangeImage& img) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      if (img.occupied(y, x)) return y;
  return -1;
}

}  // namespace

TEST(Projection, ForwardAxisPoint) {
  // (1,0,0) with w=1024, h=64, fov +3/-25: u = 512, v = floor((1-25/28)*64) = 6
  auto img = project_cloud({Point{1, 0, 0, 0}}, default_cfg());
  EXPECT_EQ(pixel_u(img, 1.0f), 512);
  EXPECT_EQ(occupied_row(img), 6);
}

TEST(Projection, TopOfFovLandsOnRowZero) {
  // pitch at the +3 deg boundary, nudged to the nearest float inside the FOV
  const double rad = 3.0 * std::numbers::pi / 180.0;
  Point p{static_cast<float>(std::cos(rad)), 0.0f,
          std::nextafterf(static_cast<float>(std::sin(rad)), 0.0f), 0};
  auto img = project_cloud({p}, default_cfg());
  EXPECT_EQ(occupied_row(img), 0);
}

TEST(Projection, LeftAxisPoint) {
  // (0,1,0): atan2(1,0) = pi/2 -> u = 0.5*(1-0.5)*1024 = 256
  auto img = project_cloud({Point{0, 1, 0, 0}}, default_cfg());
  EXPECT_EQ(pixel_u(img, 1.0f), 256);
}

TEST(Projection, BottomOfFovClampsToLastRow) {
  const double rad = -25.0 * std::numbers::pi / 180.0;
  Point p{static_cast<float>(std::cos(rad)), 0.0f,
          std::nextafterf(static_cast<float>(std::sin(rad)), 0.0f), 0};
  auto img = project_cloud({p}, default_cfg());
  EXPECT_EQ(occupied_row(img), 63);
}

TEST(Projection, OutOfFovAndOutOfRangeAreDropped) {
  auto cfg = default_cfg();
  std::vector<Point> points = {
      Point{1, 0, 1, 0},       // pitch 45 deg, above fov_up
      Point{1, 0, -1, 0},      // pitch -45 deg, below fov_down
      Point{100, 0, 0, 0},     // beyond max_range (85 m)
      Point{0, 0, 0, 0},       // rho = 0
  };
  auto img = project_cloud(points, cfg);
  EXPECT_DOUBLE_EQ(img.occupancy_fraction(), 0.0);
}

TEST(Projection, NearestReturnWinsOnCollision) {
  auto cfg = default_cfg();
  std::vector<Point> points = {Point{10, 0, 0, 0}, Point{4, 0, 0, 0}, Point{7, 0, 0, 0}};
  auto img = project_cloud(points, cfg);
  EXPECT_FLOAT_EQ(img.at(6, 512), 4.0f);

  // order independence
  std::vector<Point> reversed(points.rbegin(), points.rend());
  auto img2 = project_cloud(reversed, cfg);
  EXPECT_EQ(img.ranges, img2.ranges);
}

TEST(Projection, EmptyCloudIsValidAllZero) {
  auto img = project_cloud({}, default_cfg());
  EXPECT_EQ(img.h, 64);
  EXPECT_EQ(img.w, 1024);
  EXPECT_DOUBLE_EQ(img.occupancy_fraction(), 0.0);
}

TEST(Projection, PixelIndicesAlwaysInBounds) {
  Rng rng(77);
  std::vector<Point> points;
  for (int i = 0; i < 5000; ++i) {
    Point p;
    p.x = static_cast<float>(rng.uniform(-80, 80));
    p.y = static_cast<float>(rng.uniform(-80, 80));
    p.z = static_cast<float>(rng.uniform(-10, 5));
    points.push_back(p);
  }
  auto cfg = default_cfg();
  auto img = project_cloud(points, cfg);  // would crash or corrupt on out-of-bounds writes
  EXPECT_EQ(static_cast<int>(img.ranges.size()), cfg.width * cfg.height);
  for (float r : img.ranges) EXPECT_LE(r, cfg.max_range);
}

TEST(Projection, AngularGridReprojectsWithoutLoss) {
  // a synthetic cloud sampled at pixel centers must fill every pixel
  auto cfg = default_cfg();
  cfg.width = 128;
  cfg.height = 16;
  const double fov = cfg.fov_deg();
  const double down_abs = std::abs(cfg.fov_down_deg);
  const double deg2rad = std::numbers::pi / 180.0;
  std::vector<Point> points;
  for (int row = 0; row < cfg.height; ++row) {
    const double pitch = (fov * (1.0 - (row + 0.5) / cfg.height) - down_abs) * deg2rad;
    for (int col = 0; col < cfg.width; ++col) {
      const double azimuth = std::numbers::pi * (1.0 - (2.0 * col + 1.0) / cfg.width);
      const double r = 10.0 + row + col * 0.01;
      Point p;
      p.x = static_cast<float>(std::cos(azimuth) * std::cos(pitch) * r);
      p.y = static_cast<float>(std::sin(azimuth) * std::cos(pitch) * r);
      p.z = static_cast<float>(std::sin(pitch) * r);
      points.push_back(p);
    }
  }
  auto img = project_cloud(points, cfg);
  EXPECT_DOUBLE_EQ(img.occupancy_fraction(), 1.0);
}

TEST(Projection, ConfigValidation) {
  ProjectionConfig bad;
  bad.width = 1;
  EXPECT_THROW(bad.validate(), Error);
  ProjectionConfig flat;
  flat.fov_up_deg = 0;
  flat.fov_down_deg = 0;
  EXPECT_THROW(flat.validate(), Error);
}

TEST(Normalize, ScaleAndEmptyConvention) {
  RangeImage img;
  img.h = 1;
  img.w = 3;
  img.ranges = {85.0f, 0.0f, 42.5f};
  auto cfg = default_cfg();
  auto t = normalize(img, cfg);
  ASSERT_EQ(t.shape(), (Shape{1, 1, 1, 3}));
  EXPECT_FLOAT_EQ(t.values()[0], 1.0f);
  EXPECT_FLOAT_EQ(t.values()[1], 0.0f);
  EXPECT_FLOAT_EQ(t.values()[2], 0.5f);
}

TEST(RangeImage, OccupancyMatchesPositiveRanges) {
  RangeImage img;
  img.h = 2;
  img.w = 2;
  img.ranges = {0.0f, 1.0f, 3.0f, 0.0f};
  auto occ = img.occupancy();
  EXPECT_EQ(occ, (std::vector<std::uint8_t>{0, 1, 1, 0}));
  EXPECT_DOUBLE_EQ(img.occupancy_fraction(), 0.5);
}
