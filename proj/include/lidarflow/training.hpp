// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lidarflow/checkpoint.hpp"
#include "lidarflow/dataset.hpp"
#include "lidarflow/loss.hpp"
#include "lidarflow/model.hpp"

namespace lidarflow {

struct TrainConfig {
  Phase phase = Phase::Train;
  int epochs = 60;
  int batch_size = 4;
  double initial_lr = 1e-4;
  double step_decay_factor = 0.1;  // train phase: applied every step_decay_every epochs
  int step_decay_every = 20;
  double plateau_factor = 0.5;  // finetune phase: applied after plateau_patience stagnant rounds
  int plateau_patience = 4;
  double plateau_min_rel_improvement = 1e-4;
  OptimizerConfig optimizer{};
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs <= 0) fail("TrainConfig: epochs must be positive");
    if (batch_size <= 0) fail("TrainConfig: batch_size must be positive");
    if (!(initial_lr > 0)) fail("TrainConfig: initial_lr must be positive");
    if (step_decay_every <= 0) fail("TrainConfig: step_decay_every must be positive");
    if (plateau_patience <= 0) fail("TrainConfig: plateau_patience must be positive");
  }

  static TrainConfig train_defaults() { return TrainConfig{}; }

  static TrainConfig finetune_defaults() {
    TrainConfig cfg;
    cfg.phase = Phase::Finetune;
    cfg.epochs = 40;
    cfg.batch_size = 1;
    cfg.initial_lr = 0.5e-4;
    return cfg;
  }
};

/// Learning rate entering the given epoch. Train phase: step decay by
/// step_decay_factor every step_decay_every epochs. Finetune phase: the rate
/// halves each time the best validation loss has seen plateau_patience
/// consecutive rounds without relative improvement; the counter resets on
/// improvement and after each decay.
inline double lr_schedule(const TrainConfig& cfg, int epoch, std::span<const double> val_history) {
  cfg.validate();
  if (epoch < 0) fail("lr_schedule: epoch must be non-negative");
  if (cfg.phase == Phase::Train)
    return cfg.initial_lr * std::pow(cfg.step_decay_factor, epoch / cfg.step_decay_every);

  double lr = cfg.initial_lr;
  double best = std::numeric_limits<double>::infinity();
  int stagnant = 0;
  for (double v : val_history) {
    if (v < best * (1.0 - cfg.plateau_min_rel_improvement)) {
      best = v;
      stagnant = 0;
    } else {
      ++stagnant;
      if (stagnant >= cfg.plateau_patience) {
        lr *= cfg.plateau_factor;
        stagnant = 0;
      }
    }
  }
  return lr;
}

/// Stacks normalized range images into one (N,1,H,W) batch tensor.
template <typename S = float>
Tensor<S> stack_frames(const std::vector<const RangeImage*>& frames, float max_range) {
  if (frames.empty()) fail("stack_frames: empty batch");
  const int h = frames.front()->h;
  const int w = frames.front()->w;
  for (const auto* f : frames)
    if (f->h != h || f->w != w)
      fail("stack_frames: mixed frame extents " + std::to_string(f->h) + "x" +
           std::to_string(f->w) + " vs " + std::to_string(h) + "x" + std::to_string(w));
  const Shape shape{static_cast<int>(frames.size()), 1, h, w};
  std::vector<S> values(static_cast<std::size_t>(shape.numel()));
  const double inv = 1.0 / max_range;
  std::size_t off = 0;
  for (const auto* f : frames) {
    for (float r : f->ranges) values[off++] = static_cast<S>(r * inv);
  }
  return Tensor<S>::constant(shape, std::move(values));
}

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_loss = 0;
};

struct TrainCallbacks {
  /// Called after each optimizer step; return false to stop training early.
  std::function<bool(int step, double loss, ParameterStore<float>& params)> on_step;
  std::function<void(const EpochStats&)> on_epoch;
};

struct TrainRun {
  Checkpoint checkpoint;
  std::vector<EpochStats> history;
  bool stopped_early = false;
};

namespace detail {

inline double dataset_loss(const PairDataset& data, const TrainConfig& cfg,
                           ParameterStore<float>& params, const ModelConfig& mcfg,
                           const LossWeights& weights) {
  double total = 0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < data.size(); i += cfg.batch_size) {
    std::vector<FramePair> pairs;
    for (std::size_t j = i; j < std::min(data.size(), i + cfg.batch_size); ++j)
      pairs.push_back(data.at(j));
    std::vector<const RangeImage*> firsts, seconds;
    for (const auto& p : pairs) {
      firsts.push_back(&p.first);
      seconds.push_back(&p.second);
    }
    auto I1 = stack_frames(firsts, data.max_range());
    auto I2 = stack_frames(seconds, data.max_range());
    auto flows = model_forward(I1, I2, params, mcfg);
    auto loss = cfg.phase == Phase::Train ? training_loss(flows, I1, I2, weights)
                                          : finetune_loss(flows, I1, I2, weights, params);
    total += static_cast<double>(loss.item()) * pairs.size();
    counted += pairs.size();
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

inline TrainRun run_phase(const PairDataset& trainset, const PairDataset* valset,
                          const TrainConfig& cfg, ParameterStore<float>& params,
                          const ModelConfig& mcfg, const LossWeights& weights,
                          const std::filesystem::path& checkpoint_dir,
                          const TrainCallbacks& callbacks) {
  cfg.validate();
  mcfg.validate();
  if (trainset.size() == 0) fail("train: dataset is empty");

  TrainRun run;
  std::vector<double> val_history;
  double best_val = std::numeric_limits<double>::infinity();
  Rng shuffle_rng(cfg.seed ^ 0x7261696e);
  int step = 0;

  std::vector<std::size_t> order(trainset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const bool write_checkpoints = !checkpoint_dir.empty();
  if (write_checkpoints) std::filesystem::create_directories(checkpoint_dir);

  auto snapshot = [&](int epoch, double best) {
    Checkpoint ckpt;
    ckpt.store = params.clone();
    ckpt.epoch = epoch;
    ckpt.phase = cfg.phase;
    ckpt.best_validation_loss = best;
    ckpt.config_fingerprint = mcfg.fingerprint();
    return ckpt;
  };

  for (int epoch = 0; epoch < cfg.epochs && !run.stopped_early; ++epoch) {
    const double lr = lr_schedule(cfg, epoch, val_history);
    shuffle_rng.shuffle(order);

    double epoch_loss = 0;
    std::size_t epoch_pairs = 0;
    for (std::size_t i = 0; i < order.size() && !run.stopped_early; i += cfg.batch_size) {
      std::vector<FramePair> pairs;
      for (std::size_t j = i; j < std::min(order.size(), i + cfg.batch_size); ++j)
        pairs.push_back(trainset.at(order[j]));
      std::vector<const RangeImage*> firsts, seconds;
      for (const auto& p : pairs) {
        firsts.push_back(&p.first);
        seconds.push_back(&p.second);
      }
      auto I1 = stack_frames(firsts, trainset.max_range());
      auto I2 = stack_frames(seconds, trainset.max_range());
      auto flows = model_forward(I1, I2, params, mcfg);
      auto loss = cfg.phase == Phase::Train ? training_loss(flows, I1, I2, weights)
                                            : finetune_loss(flows, I1, I2, weights, params);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value))
        fail("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
             std::to_string(i / cfg.batch_size) + " (phase " + phase_name(cfg.phase) + ")");
      backward(loss, params);
      OptimizerConfig opt = cfg.optimizer;
      opt.lr = lr;
      adam_step(params, opt);
      params.zero_grads();

      epoch_loss += value * pairs.size();
      epoch_pairs += pairs.size();
      ++step;
      if (callbacks.on_step && !callbacks.on_step(step, value, params)) run.stopped_early = true;
    }

    const double val_loss = valset ? dataset_loss(*valset, cfg, params, mcfg, weights)
                                   : dataset_loss(trainset, cfg, params, mcfg, weights);
    val_history.push_back(val_loss);

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    stats.train_loss = epoch_pairs ? epoch_loss / static_cast<double>(epoch_pairs) : 0.0;
    stats.val_loss = val_loss;
    run.history.push_back(stats);
    if (callbacks.on_epoch) callbacks.on_epoch(stats);

    const bool improved = val_loss < best_val;
    if (improved) best_val = val_loss;
    if (write_checkpoints) {
      save_checkpoint(checkpoint_dir / "last.ckpt", snapshot(epoch, best_val));
      if (improved) save_checkpoint(checkpoint_dir / "best.ckpt", snapshot(epoch, best_val));
    }
  }

  run.checkpoint = snapshot(static_cast<int>(run.history.size()) - 1, best_val);
  return run;
}

}  // namespace detail

/// From-scratch training with the multi-scale loss.
inline TrainRun train(const PairDataset& trainset, const PairDataset* valset,
                      const TrainConfig& cfg, ParameterStore<float>& params,
                      const ModelConfig& mcfg, const LossWeights& weights,
                      const std::filesystem::path& checkpoint_dir = {},
                      const TrainCallbacks& callbacks = {}) {
  if (cfg.phase != Phase::Train) fail("train: config phase must be 'train'");
  return detail::run_phase(trainset, valset, cfg, params, mcfg, weights, checkpoint_dir,
                           callbacks);
}

/// Fine-tuning from a train-phase checkpoint with the masked loss. Optimizer
/// state restarts for the new phase.
inline TrainRun finetune(const PairDataset& trainset, const PairDataset* valset,
                         const TrainConfig& cfg, const Checkpoint& start,
                         const ModelConfig& mcfg, const LossWeights& weights,
                         const std::filesystem::path& checkpoint_dir = {},
                         const TrainCallbacks& callbacks = {}) {
  if (cfg.phase != Phase::Finetune) fail("finetune: config phase must be 'finetune'");
  if (start.config_fingerprint && start.config_fingerprint != mcfg.fingerprint())
    fail("finetune: checkpoint was produced with a different model configuration");
  ParameterStore<float> params = start.store.clone();
  params.reset_optimizer_state();
  return detail::run_phase(trainset, valset, cfg, params, mcfg, weights, checkpoint_dir,
                           callbacks);
}

}  // namespace lidarflow
