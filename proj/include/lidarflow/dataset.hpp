// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lidarflow/io.hpp"
#include "lidarflow/projection.hpp"

namespace lidarflow {

/// Parses little-endian (x, y, z, intensity) f32 quadruples. Points with
/// non-finite components are skipped and counted in *skipped.
inline std::vector<Point> load_velodyne_bin(const std::filesystem::path& path,
                                            std::size_t* skipped = nullptr) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() % 16 != 0)
    fail(path.string() + ": size " + std::to_string(bytes.size()) +
         " is not a multiple of 16 bytes (x,y,z,intensity float records)");
  const std::size_t count = bytes.size() / 16;
  std::vector<Point> points;
  points.reserve(count);
  std::size_t bad = 0;
  detail::ByteReader r{bytes.data(), bytes.size(), 0, path.string()};
  for (std::size_t i = 0; i < count; ++i) {
    Point p;
    p.x = r.f32();
    p.y = r.f32();
    p.z = r.f32();
    p.intensity = r.f32();
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) ||
        !std::isfinite(p.intensity)) {
      ++bad;
      continue;
    }
    points.push_back(p);
  }
  if (skipped) *skipped = bad;
  return points;
}

/// Sequence ids per role. The defaults follow KITTI odometry numbering:
/// 00-15 train, 16-18 validation, 19-21 test.
struct DatasetSplit {
  std::vector<std::string> train, val, test;

  static DatasetSplit kitti_default() {
    DatasetSplit s;
    auto fill = [](std::vector<std::string>& v, int lo, int hi) {
      for (int i = lo; i <= hi; ++i) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "%02d", i);
        v.emplace_back(buf);
      }
    };
    fill(s.train, 0, 15);
    fill(s.val, 16, 18);
    fill(s.test, 19, 21);
    return s;
  }

  void validate() const {
    std::vector<std::string> all;
    all.insert(all.end(), train.begin(), train.end());
    all.insert(all.end(), val.begin(), val.end());
    all.insert(all.end(), test.begin(), test.end());
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end())
      fail("DatasetSplit: train/val/test sequences must be disjoint");
  }

  /// Parses "00-15:16-18:19-21" style specs (comma lists and N-M ranges).
  static DatasetSplit parse(const std::string& spec) {
    auto parse_group = [](const std::string& group) {
      std::vector<std::string> out;
      std::size_t pos = 0;
      while (pos <= group.size()) {
        const auto comma = group.find(',', pos);
        const std::string item =
            group.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!item.empty()) {
          const auto dash = item.find('-');
          if (dash == std::string::npos) {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "%02d", std::atoi(item.c_str()));
            out.emplace_back(buf);
          } else {
            const int lo = std::atoi(item.substr(0, dash).c_str());
            const int hi = std::atoi(item.substr(dash + 1).c_str());
            if (hi < lo) fail("DatasetSplit: bad range '" + item + "'");
            for (int i = lo; i <= hi; ++i) {
              char buf[8];
              std::snprintf(buf, sizeof(buf), "%02d", i);
              out.emplace_back(buf);
            }
          }
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
      return out;
    };
    const auto first = spec.find(':');
    const auto second = first == std::string::npos ? std::string::npos : spec.find(':', first + 1);
    if (first == std::string::npos || second == std::string::npos)
      fail("DatasetSplit: expected 'train:val:test' groups, got '" + spec + "'");
    DatasetSplit s;
    s.train = parse_group(spec.substr(0, first));
    s.val = parse_group(spec.substr(first + 1, second - first - 1));
    s.test = parse_group(spec.substr(second + 1));
    s.validate();
    return s;
  }
};

/// Three consecutive frames of one sequence; training consumes the first two.
struct Triplet {
  std::string sequence;
  int first_frame = 0;
  std::array<std::filesystem::path, 3> files;
};

struct TripletSets {
  std::vector<Triplet> train, val, test;
  std::vector<std::string> warnings;
};

inline std::filesystem::path sequence_velodyne_dir(const std::filesystem::path& root,
                                                   const std::string& sequence) {
  return root / "sequences" / sequence / "velodyne";
}

inline std::vector<std::filesystem::path> list_sequence_frames(
    const std::filesystem::path& root, const std::string& sequence) {
  const auto dir = sequence_velodyne_dir(root, sequence);
  std::vector<std::filesystem::path> frames;
  if (!std::filesystem::is_directory(dir)) return frames;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".bin")
      frames.push_back(entry.path());
  std::sort(frames.begin(), frames.end());
  return frames;
}

/// Non-overlapping triplets (frames 0-1-2, 3-4-5, ...); a trailing remainder
/// of one or two frames is dropped. Sequences with fewer than three frames
/// are excluded with a warning.
inline std::vector<Triplet> build_sequence_triplets(const std::filesystem::path& root,
                                                    const std::string& sequence,
                                                    std::vector<std::string>* warnings = nullptr) {
  const auto frames = list_sequence_frames(root, sequence);
  std::vector<Triplet> out;
  if (frames.size() < 3) {
    if (warnings)
      warnings->push_back("sequence " + sequence + " has " + std::to_string(frames.size()) +
                          " frames (< 3); excluded");
    return out;
  }
  for (std::size_t i = 0; i + 2 < frames.size(); i += 3) {
    Triplet t;
    t.sequence = sequence;
    t.first_frame = static_cast<int>(i);
    t.files = {frames[i], frames[i + 1], frames[i + 2]};
    out.push_back(std::move(t));
  }
  return out;
}

inline TripletSets build_triplets(const std::filesystem::path& root, const DatasetSplit& split) {
  split.validate();
  TripletSets sets;
  auto gather = [&](const std::vector<std::string>& sequences, std::vector<Triplet>& dst) {
    for (const auto& seq : sequences) {
      auto triplets = build_sequence_triplets(root, seq, &sets.warnings);
      dst.insert(dst.end(), triplets.begin(), triplets.end());
    }
  };
  gather(split.train, sets.train);
  gather(split.val, sets.val);
  gather(split.test, sets.test);
  return sets;
}

/// A pair of consecutive range images (meters).
struct FramePair {
  RangeImage first, second;
};

class PairDataset {
 public:
  virtual ~PairDataset() = default;
  virtual std::size_t size() const = 0;
  virtual FramePair at(std::size_t index) const = 0;
  virtual float max_range() const = 0;
};

class MemoryPairDataset : public PairDataset {
 public:
  MemoryPairDataset(std::vector<FramePair> pairs, float max_range)
      : pairs_(std::move(pairs)), max_range_(max_range) {}
  std::size_t size() const override { return pairs_.size(); }
  FramePair at(std::size_t index) const override { return pairs_.at(index); }
  float max_range() const override { return max_range_; }

 private:
  std::vector<FramePair> pairs_;
  float max_range_;
};

inline std::filesystem::path default_cache_dir(const std::filesystem::path& root) {
  if (const char* env = std::getenv("LIDARFLOW_CACHE"); env && *env)
    return std::filesystem::path(env);
  return root / "rimg_cache";
}

/// Loads a scan, projects it, and caches the result as a RIMG file keyed by
/// the projection-config fingerprint.
inline RangeImage load_projected_frame(const std::filesystem::path& scan,
                                       const std::string& sequence,
                                       const ProjectionConfig& cfg,
                                       const std::filesystem::path& cache_dir) {
  char tag[24];
  std::snprintf(tag, sizeof(tag), "%016" PRIx64, cfg.fingerprint());
  const auto dir = cache_dir / tag / sequence;
  const auto cached = dir / (scan.stem().string() + ".rimg");
  if (std::filesystem::is_regular_file(cached)) return read_rimg(cached);
  const auto points = load_velodyne_bin(scan);
  RangeImage img = project_cloud(points, cfg);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!ec) write_rimg(cached, img);
  return img;
}

/// Pair view over KITTI-style triplets: item i is (frame i, frame i+1) of
/// triplet i, projected on demand through the cache.
class KittiPairDataset : public PairDataset {
 public:
  KittiPairDataset(std::vector<Triplet> triplets, ProjectionConfig cfg,
                   std::filesystem::path cache_dir)
      : triplets_(std::move(triplets)), cfg_(cfg), cache_dir_(std::move(cache_dir)) {}

  std::size_t size() const override { return triplets_.size(); }

  FramePair at(std::size_t index) const override {
    const Triplet& t = triplets_.at(index);
    FramePair pair;
    pair.first = load_projected_frame(t.files[0], t.sequence, cfg_, cache_dir_);
    pair.second = load_projected_frame(t.files[1], t.sequence, cfg_, cache_dir_);
    return pair;
  }

  float max_range() const override { return static_cast<float>(cfg_.max_range); }

  const std::vector<Triplet>& triplets() const { return triplets_; }

 private:
  std::vector<Triplet> triplets_;
  ProjectionConfig cfg_;
  std::filesystem::path cache_dir_;
};

}  // namespace lidarflow
