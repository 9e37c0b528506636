// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: projection, training, fine-tuning, inference,
// evaluation, gradient checking, and a self-test.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>

#include "lidarflow/config.hpp"
#include "lidarflow/eval.hpp"
#include "lidarflow/gradcheck.hpp"
#include "lidarflow/synthetic.hpp"
#include "lidarflow/training.hpp"

namespace fs = std::filesystem;
using namespace lidarflow;

namespace {

struct CommonFlags {
  std::string config_file;
  std::string data_root;
  std::string checkpoint;
  std::string out;
  std::string split;
  std::string cache_dir;
  std::string sequence;
  int width = -1, height = -1;
  double fov_up = std::numeric_limits<double>::quiet_NaN();
  double fov_down = std::numeric_limits<double>::quiet_NaN();
  double max_range = std::numeric_limits<double>::quiet_NaN();
  long long seed = -1;
  int limit = -1;
  int offset = 0;
  int holdout = -1;
  int epochs = -1;
  int batch_size = -1;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_file, "key=value config file");
  cmd->add_option("--data-root", f.data_root, "dataset root (contains sequences/)");
  cmd->add_option("--checkpoint", f.checkpoint, "checkpoint file");
  cmd->add_option("--out", f.out, "output file or directory");
  cmd->add_option("--width", f.width, "range image width");
  cmd->add_option("--height", f.height, "range image height");
  cmd->add_option("--fov-up", f.fov_up, "upper vertical FOV bound, degrees");
  cmd->add_option("--fov-down", f.fov_down, "lower vertical FOV bound, degrees (signed)");
  cmd->add_option("--max-range", f.max_range, "maximum range in meters");
  cmd->add_option("--seed", f.seed, "RNG seed");
  cmd->add_option("--split", f.split, "sequence split as train:val:test (e.g. 00-15:16-18:19-21)");
  cmd->add_option("--cache-dir", f.cache_dir,
                  "projected-image cache directory (or env LIDARFLOW_CACHE)");
  cmd->add_option("--sequence", f.sequence, "restrict to one sequence id");
  cmd->add_option("--limit", f.limit, "cap on triplets");
  cmd->add_option("--offset", f.offset, "skip this many triplets first");
  cmd->add_option("--holdout", f.holdout, "triplets held out for validation after --limit");
  cmd->add_option("--epochs", f.epochs, "override epoch count");
  cmd->add_option("--batch-size", f.batch_size, "override batch size");
}

RunConfig resolve(const CommonFlags& f) {
  RunConfig cfg;
  if (!f.config_file.empty()) load_config_file(cfg, f.config_file);
  if (!f.data_root.empty()) cfg.data_root = f.data_root;
  if (!f.split.empty()) cfg.split = f.split;
  if (!f.cache_dir.empty()) cfg.cache_dir = f.cache_dir;
  if (!f.sequence.empty()) cfg.sequence = f.sequence;
  if (f.width > 0) cfg.projection.width = f.width;
  if (f.height > 0) cfg.projection.height = f.height;
  if (!std::isnan(f.fov_up)) cfg.projection.fov_up_deg = f.fov_up;
  if (!std::isnan(f.fov_down)) cfg.projection.fov_down_deg = f.fov_down;
  if (!std::isnan(f.max_range)) cfg.projection.max_range = f.max_range;
  if (f.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(f.seed);
  if (f.limit >= 0) cfg.limit = f.limit;
  if (f.epochs > 0) cfg.train.epochs = f.epochs;
  if (f.batch_size > 0) cfg.train.batch_size = f.batch_size;
  return cfg;
}

fs::path cache_dir_for(const RunConfig& cfg) {
  if (!cfg.cache_dir.empty()) return cfg.cache_dir;
  return default_cache_dir(cfg.data_root.empty() ? fs::path(".") : fs::path(cfg.data_root));
}

DatasetSplit split_for(const RunConfig& cfg) {
  return cfg.split.empty() ? DatasetSplit::kitti_default() : DatasetSplit::parse(cfg.split);
}

std::vector<Triplet> sequence_window(const RunConfig& cfg, const CommonFlags& f,
                                     int default_limit) {
  auto triplets = build_sequence_triplets(cfg.data_root, cfg.sequence);
  if (triplets.empty()) fail("sequence " + cfg.sequence + " yields no triplets");
  const int offset = std::min<int>(f.offset, static_cast<int>(triplets.size()));
  triplets.erase(triplets.begin(), triplets.begin() + offset);
  const int limit = cfg.limit > 0 ? cfg.limit : default_limit;
  if (limit > 0 && static_cast<int>(triplets.size()) > limit) triplets.resize(limit);
  return triplets;
}

int cmd_project(const CommonFlags& f, const std::string& in_file, const std::string& render_file) {
  RunConfig cfg = resolve(f);
  cfg.projection.validate();

  if (!in_file.empty()) {
    const auto points = load_velodyne_bin(in_file);
    RangeImage img = project_cloud(points, cfg.projection);
    if (!f.out.empty()) write_rimg(f.out, img);
    if (!render_file.empty())
      write_pgm(render_file, img.w, img.h, render_range(img, cfg.projection.max_range));
    std::printf("projected %zu points -> %dx%d image, occupancy %.1f%%\n", points.size(), img.h,
                img.w, 100.0 * img.occupancy_fraction());
    return 0;
  }

  if (cfg.data_root.empty()) fail("project: need --in or --data-root");
  const auto split = split_for(cfg);
  const auto cache = cache_dir_for(cfg);
  std::vector<std::string> sequences;
  sequences.insert(sequences.end(), split.train.begin(), split.train.end());
  sequences.insert(sequences.end(), split.val.begin(), split.val.end());
  sequences.insert(sequences.end(), split.test.begin(), split.test.end());
  std::size_t frames = 0;
  for (const auto& seq : sequences) {
    if (!cfg.sequence.empty() && seq != cfg.sequence) continue;
    for (const auto& scan : list_sequence_frames(cfg.data_root, seq)) {
      load_projected_frame(scan, seq, cfg.projection, cache);
      ++frames;
    }
  }
  std::printf("cached %zu projected frames under %s\n", frames, cache.string().c_str());
  return 0;
}

ModelConfig model_config_for_checkpoint(const Checkpoint& ckpt) {
  ModelConfig cfg;
  if (ckpt.config_fingerprint && ckpt.config_fingerprint != cfg.fingerprint()) {
    ModelConfig no_cbam = cfg;
    no_cbam.use_cbam = false;
    if (ckpt.config_fingerprint == no_cbam.fingerprint()) return no_cbam;
    ModelConfig compact = ModelConfig::compact();
    if (ckpt.config_fingerprint == compact.fingerprint()) return compact;
    fail("checkpoint was produced with an unknown model configuration");
  }
  return cfg;
}

int cmd_train(const CommonFlags& f, bool finetune_mode) {
  RunConfig cfg = resolve(f);
  if (cfg.data_root.empty()) fail("train: --data-root is required");
  cfg.train.phase = finetune_mode ? Phase::Finetune : Phase::Train;
  if (f.epochs <= 0 && finetune_mode) cfg.train.epochs = 40;
  if (f.batch_size <= 0 && finetune_mode) cfg.train.batch_size = 1;
  if (finetune_mode && cfg.train.initial_lr == TrainConfig{}.initial_lr)
    cfg.train.initial_lr = 0.5e-4;

  const auto cache = cache_dir_for(cfg);
  std::unique_ptr<KittiPairDataset> trainset, valset;
  if (!cfg.sequence.empty()) {
    auto window = sequence_window(cfg, f, 0);
    std::vector<Triplet> train_part = window;
    std::vector<Triplet> val_part;
    if (f.holdout > 0) {
      auto all = build_sequence_triplets(cfg.data_root, cfg.sequence);
      const std::size_t begin = f.offset + train_part.size();
      for (std::size_t i = begin; i < all.size() && val_part.size() < (std::size_t)f.holdout; ++i)
        val_part.push_back(all[i]);
    }
    trainset = std::make_unique<KittiPairDataset>(train_part, cfg.projection, cache);
    if (!val_part.empty())
      valset = std::make_unique<KittiPairDataset>(val_part, cfg.projection, cache);
  } else {
    const auto split = split_for(cfg);
    auto sets = build_triplets(cfg.data_root, split);
    for (const auto& w : sets.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    if (cfg.limit > 0 && static_cast<int>(sets.train.size()) > cfg.limit)
      sets.train.resize(cfg.limit);
    trainset = std::make_unique<KittiPairDataset>(sets.train, cfg.projection, cache);
    if (!sets.val.empty())
      valset = std::make_unique<KittiPairDataset>(sets.val, cfg.projection, cache);
  }

  ModelConfig mcfg;
  LossWeights weights;
  const fs::path out_dir = f.out.empty() ? fs::path("checkpoints") : fs::path(f.out);

  TrainCallbacks callbacks;
  callbacks.on_epoch = [](const EpochStats& s) {
    std::printf("epoch %3d  lr %.2e  train %.6f  val %.6f\n", s.epoch, s.lr, s.train_loss,
                s.val_loss);
    std::fflush(stdout);
  };

  TrainRun run;
  if (finetune_mode) {
    if (f.checkpoint.empty()) fail("finetune: --checkpoint is required");
    Checkpoint start = load_checkpoint(f.checkpoint);
    mcfg = model_config_for_checkpoint(start);
    run = finetune(*trainset, valset.get(), cfg.train, start, mcfg, weights, out_dir, callbacks);
  } else {
    ParameterStore<float> params;
    init_model_params(params, mcfg, cfg.train.seed);
    run = train(*trainset, valset.get(), cfg.train, params, mcfg, weights, out_dir, callbacks);
  }
  std::printf("done: %zu epochs, best val %.6f, checkpoints in %s\n", run.history.size(),
              run.checkpoint.best_validation_loss, out_dir.string().c_str());
  return 0;
}

int cmd_infer(const CommonFlags& f, const std::string& frame1, const std::string& frame2,
              const std::string& render_file) {
  RunConfig cfg = resolve(f);
  if (f.checkpoint.empty()) fail("infer: --checkpoint is required");
  if (frame1.empty() || frame2.empty()) fail("infer: --frame1 and --frame2 are required");
  Checkpoint ckpt = load_checkpoint(f.checkpoint);
  const ModelConfig mcfg = model_config_for_checkpoint(ckpt);
  RangeImage a = read_rimg(frame1);
  RangeImage b = read_rimg(frame2);
  Tensor<float> flow =
      infer_flow(a, b, ckpt.store, mcfg, static_cast<float>(cfg.projection.max_range));
  if (!f.out.empty()) write_flow(f.out, flow);
  if (!render_file.empty())
    write_ppm(render_file, flow.shape().w, flow.shape().h, render_flow(flow));
  const auto stats = flow_stats_over_occupied(flow, a);
  std::printf("flow %dx%d: mean |u| %.3f px, mean |v| %.3f px over %zu occupied pixels\n",
              flow.shape().h, flow.shape().w, stats.mean_abs_u, stats.mean_abs_v, stats.pixels);
  return 0;
}

int cmd_eval(const CommonFlags& f) {
  RunConfig cfg = resolve(f);
  if (f.checkpoint.empty()) fail("eval: --checkpoint is required");
  if (cfg.data_root.empty()) fail("eval: --data-root is required");
  Checkpoint ckpt = load_checkpoint(f.checkpoint);
  const ModelConfig mcfg = model_config_for_checkpoint(ckpt);
  const auto cache = cache_dir_for(cfg);

  std::vector<Triplet> triplets;
  if (!cfg.sequence.empty()) {
    triplets = sequence_window(cfg, f, 0);
  } else {
    auto sets = build_triplets(cfg.data_root, split_for(cfg));
    triplets = std::move(sets.test);
    if (cfg.limit > 0 && static_cast<int>(triplets.size()) > cfg.limit)
      triplets.resize(cfg.limit);
  }
  KittiPairDataset testset(triplets, cfg.projection, cache);

  const float max_range = static_cast<float>(cfg.projection.max_range);
  auto report = eval_l1(
      [&](const RangeImage& a, const RangeImage& b) {
        return infer_flow(a, b, ckpt.store, mcfg, max_range);
      },
      testset, param_count(ckpt.store));

  std::printf("frames:            %zu\n", report.frame_count);
  std::printf("parameters:        %lld\n", static_cast<long long>(report.parameter_count));
  std::printf("mean L1 (model):   %.4f m\n", report.mean_l1);
  std::printf("mean L1 (zero):    %.4f m\n", report.baseline_mean_l1);
  if (!f.out.empty()) {
    nlohmann::json j;
    j["frame_count"] = report.frame_count;
    j["parameter_count"] = report.parameter_count;
    j["mean_l1_m"] = report.mean_l1;
    j["baseline_mean_l1_m"] = report.baseline_mean_l1;
    j["per_frame_l1_m"] = report.per_frame_l1;
    std::ofstream out(f.out);
    out << j.dump(2) << "\n";
  }
  return 0;
}

int cmd_gradcheck(const CommonFlags& f) {
  const std::uint64_t seed = f.seed >= 0 ? static_cast<std::uint64_t>(f.seed) : 0x9d5;
  auto results = op_gradient_suite<double>(5, seed);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-32s %s  max rel err %.3g over %zu checks\n", r.op.c_str(),
                r.report.ok ? "ok  " : "FAIL", r.report.max_rel_error, r.report.checked);
    ok = ok && r.report.ok;
  }
  return ok ? 0 : 1;
}

int cmd_selftest(const CommonFlags& f) {
  int failures = 0;
  auto check = [&failures](const char* name, bool ok, const std::string& detail = "") {
    std::printf("[%s] %s%s%s\n", ok ? "ok" : "FAIL", name, detail.empty() ? "" : ": ",
                detail.c_str());
    if (!ok) ++failures;
  };

  {
    auto results = op_gradient_suite<double>(2, 0xbeef);
    bool ok = true;
    double worst = 0;
    for (const auto& r : results) {
      ok = ok && r.report.ok;
      worst = std::max(worst, r.report.max_rel_error);
    }
    check("gradient oracle", ok, "max rel err " + std::to_string(worst));
  }

  const fs::path dir = fs::temp_directory_path() / "lidarflow-selftest";
  fs::create_directories(dir);
  {
    RangeImage img = synthetic_range_image(8, 16, 3);
    write_rimg(dir / "t.rimg", img);
    RangeImage back = read_rimg(dir / "t.rimg");
    check("rimg round trip", back.ranges == img.ranges);
  }
  {
    Rng rng(11);
    std::vector<float> v(2 * 6 * 8);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-3, 3));
    auto flow = Tensor<float>::constant(Shape{1, 2, 6, 8}, v);
    write_flow(dir / "t.flo", flow);
    auto back = read_flow(dir / "t.flo");
    check("flow file round trip",
          std::equal(flow.values().begin(), flow.values().end(), back.values().begin()));
  }
  {
    const ModelConfig mcfg = ModelConfig::compact();
    ParameterStore<float> params;
    init_model_params(params, mcfg, 5);
    Checkpoint ckpt;
    ckpt.store = params.clone();
    ckpt.config_fingerprint = mcfg.fingerprint();
    save_checkpoint(dir / "t.ckpt", ckpt);
    Checkpoint back = load_checkpoint(dir / "t.ckpt");
    check("checkpoint round trip",
          encode_checkpoint(back) == encode_checkpoint(ckpt));
  }
  {
    const ModelConfig mcfg = ModelConfig::compact();
    ParameterStore<float> params;
    const std::uint64_t seed = f.seed >= 0 ? static_cast<std::uint64_t>(f.seed) : 21;
    init_model_params(params, mcfg, seed);
    auto pairs = make_shift_pairs(4, 64, 64, 1, seed);
    MemoryPairDataset data(pairs, 85.0f);
    TrainConfig tc;
    tc.epochs = 6;
    tc.batch_size = 4;
    tc.seed = seed;
    LossWeights lw;
    auto run = train(data, nullptr, tc, params, mcfg, lw);
    const double first = run.history.front().train_loss;
    const double last = run.history.back().train_loss;
    char detail[96];
    std::snprintf(detail, sizeof(detail), "loss %.6f -> %.6f", first, last);
    check("synthetic training decreases loss", last < first, detail);
  }
  std::printf("%s\n", failures == 0 ? "selftest passed" : "selftest FAILED");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised optical flow for LiDAR range-image sequences"};
  app.require_subcommand(1);

  CommonFlags f;
  std::string in_file, render_file, frame1, frame2;

  auto* project = app.add_subcommand("project", "project point clouds to range images");
  add_common_flags(project, f);
  project->add_option("--in", in_file, "single velodyne .bin scan");
  project->add_option("--render", render_file, "also write a grayscale PGM");

  auto* train_cmd = app.add_subcommand("train", "train from scratch");
  add_common_flags(train_cmd, f);

  auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune from a checkpoint");
  add_common_flags(finetune_cmd, f);

  auto* infer_cmd = app.add_subcommand("infer", "estimate flow for a frame pair");
  add_common_flags(infer_cmd, f);
  infer_cmd->add_option("--frame1", frame1, "reference RIMG frame");
  infer_cmd->add_option("--frame2", frame2, "target RIMG frame");
  infer_cmd->add_option("--render", render_file, "also write a color PPM");

  auto* eval_cmd = app.add_subcommand("eval", "L1 reconstruction metric on a test set");
  add_common_flags(eval_cmd, f);

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common_flags(gradcheck_cmd, f);

  auto* selftest_cmd = app.add_subcommand("selftest", "quick end-to-end smoke checks");
  add_common_flags(selftest_cmd, f);

  CLI11_PARSE(app, argc, argv);

  try {
    if (project->parsed()) return cmd_project(f, in_file, render_file);
    if (train_cmd->parsed()) return cmd_train(f, false);
    if (finetune_cmd->parsed()) return cmd_train(f, true);
    if (infer_cmd->parsed()) return cmd_infer(f, frame1, frame2, render_file);
    if (eval_cmd->parsed()) return cmd_eval(f);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(f);
    if (selftest_cmd->parsed()) return cmd_selftest(f);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
