// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "lidarflow/dataset.hpp"
#include "lidarflow/projection.hpp"
#include "lidarflow/training.hpp"

namespace lidarflow {

/// Everything a CLI run needs; populated from a flat key=value file and then
/// overridden by command-line flags.
struct RunConfig {
  TrainConfig train;
  ProjectionConfig projection;
  std::string data_root;
  std::string cache_dir;
  std::string split;  // "train:val:test" groups, empty = KITTI default
  std::string sequence;
  int limit = 0;  // cap on triplets per role, 0 = no cap
};

/// Parses "key = value" lines; '#' starts a comment, blank lines are skipped.
inline std::vector<std::pair<std::string, std::string>> parse_kv_file(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config file '" + path.string() + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto as_int = [&] { return std::atoi(value.c_str()); };
  auto as_double = [&] { return std::strtod(value.c_str(), nullptr); };
  if (key == "phase")
    cfg.train.phase = parse_phase(value);
  else if (key == "epochs")
    cfg.train.epochs = as_int();
  else if (key == "batch_size")
    cfg.train.batch_size = as_int();
  else if (key == "initial_lr")
    cfg.train.initial_lr = as_double();
  else if (key == "step_decay_factor")
    cfg.train.step_decay_factor = as_double();
  else if (key == "step_decay_every")
    cfg.train.step_decay_every = as_int();
  else if (key == "plateau_factor")
    cfg.train.plateau_factor = as_double();
  else if (key == "plateau_patience")
    cfg.train.plateau_patience = as_int();
  else if (key == "plateau_min_rel_improvement")
    cfg.train.plateau_min_rel_improvement = as_double();
  else if (key == "beta1")
    cfg.train.optimizer.beta1 = as_double();
  else if (key == "beta2")
    cfg.train.optimizer.beta2 = as_double();
  else if (key == "epsilon")
    cfg.train.optimizer.epsilon = as_double();
  else if (key == "seed")
    cfg.train.seed = static_cast<std::uint64_t>(std::strtoull(value.c_str(), nullptr, 10));
  else if (key == "width")
    cfg.projection.width = as_int();
  else if (key == "height")
    cfg.projection.height = as_int();
  else if (key == "fov_up")
    cfg.projection.fov_up_deg = as_double();
  else if (key == "fov_down")
    cfg.projection.fov_down_deg = as_double();
  else if (key == "max_range")
    cfg.projection.max_range = as_double();
  else if (key == "data_root")
    cfg.data_root = value;
  else if (key == "cache_dir")
    cfg.cache_dir = value;
  else if (key == "split")
    cfg.split = value;
  else if (key == "sequence")
    cfg.sequence = value;
  else if (key == "limit")
    cfg.limit = as_int();
  else
    fail("config: unknown key '" + key + "'");
}

inline void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  for (const auto& [key, value] : parse_kv_file(path)) apply_config_entry(cfg, key, value);
}

}  // namespace lidarflow
