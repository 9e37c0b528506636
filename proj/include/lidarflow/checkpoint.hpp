// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "lidarflow/io.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

enum class Phase { Train, Finetune };

inline std::string phase_name(Phase p) { return p == Phase::Train ? "train" : "finetune"; }

inline Phase parse_phase(const std::string& s) {
  if (s == "train") return Phase::Train;
  if (s == "finetune") return Phase::Finetune;
  fail("unknown phase '" + s + "' (expected train or finetune)");
}

/// Serialized model state: parameters, optimizer moments, and training
/// progress counters.
struct Checkpoint {
  ParameterStore<float> store;
  int epoch = 0;
  Phase phase = Phase::Train;
  double best_validation_loss = std::numeric_limits<double>::infinity();
  std::uint64_t config_fingerprint = 0;
};

// ---------------------------------------------------------------------------
// LFCK container: magic "LFCK", u32 version, u32 entry count, entries, then
// a trailing FNV-1a-64 checksum of all preceding bytes. Each entry is
// u16 name length + UTF-8 name, u8 rank, rank little-endian u32 dims, and a
// payload of little-endian f32 values. Optimizer moments live under
// "__opt__.m1." / "__opt__.m2."; progress counters are rank-0 entries whose
// names carry the value under "__meta__.".

namespace detail {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kOptM1Prefix = "__opt__.m1.";
inline constexpr const char* kOptM2Prefix = "__opt__.m2.";
inline constexpr const char* kMetaPrefix = "__meta__.";

inline void write_entry(ByteWriter& w, const std::string& name, const Shape* shape,
                        std::span<const float> payload) {
  if (name.size() > 0xffff) fail("checkpoint: entry name too long");
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.raw(name.data(), name.size());
  if (shape) {
    w.u8(4);
    w.u32(static_cast<std::uint32_t>(shape->n));
    w.u32(static_cast<std::uint32_t>(shape->c));
    w.u32(static_cast<std::uint32_t>(shape->h));
    w.u32(static_cast<std::uint32_t>(shape->w));
  } else {
    w.u8(0);
  }
  for (float v : payload) w.f32(v);
}

inline std::string format_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.raw("LFCK", 4);
  w.u32(detail::kCheckpointVersion);

  std::vector<std::string> names = ckpt.store.names();
  std::uint32_t entries = static_cast<std::uint32_t>(names.size());
  for (const auto& name : names)
    if (ckpt.store.has_moments(name)) entries += 2;
  const std::uint32_t meta_entries = 5;
  w.u32(entries + meta_entries);

  for (const auto& name : names) {
    Tensor<float> p = ckpt.store.get(name);
    const Shape shape = p.shape();
    detail::write_entry(w, name, &shape, p.values());
  }
  for (const auto& name : names) {
    if (!ckpt.store.has_moments(name)) continue;
    Tensor<float> p = ckpt.store.get(name);
    const Shape shape = p.shape();
    auto [m1, m2] = ckpt.store.moments(name);
    detail::write_entry(w, std::string(detail::kOptM1Prefix) + name, &shape, m1);
    detail::write_entry(w, std::string(detail::kOptM2Prefix) + name, &shape, m2);
  }

  char fp[24];
  std::snprintf(fp, sizeof(fp), "%016" PRIx64, ckpt.config_fingerprint);
  detail::write_entry(w, std::string(detail::kMetaPrefix) + "best_val." +
                             detail::format_double(ckpt.best_validation_loss),
                      nullptr, {});
  detail::write_entry(w, std::string(detail::kMetaPrefix) + "epoch." + std::to_string(ckpt.epoch),
                      nullptr, {});
  detail::write_entry(w, std::string(detail::kMetaPrefix) + "fingerprint." + fp, nullptr, {});
  detail::write_entry(w, std::string(detail::kMetaPrefix) + "phase." + phase_name(ckpt.phase),
                      nullptr, {});
  detail::write_entry(w, std::string(detail::kMetaPrefix) + "step_count." +
                             std::to_string(ckpt.store.step_count()),
                      nullptr, {});

  const std::uint64_t checksum = fnv1a64(w.bytes.data(), w.bytes.size());
  w.u64(checksum);
  return w.bytes;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                                    const std::string& source) {
  if (bytes.size() < 20) fail(source + ": too short to be a checkpoint");
  const std::uint64_t stored = [&] {
    detail::ByteReader tail{bytes.data(), bytes.size(), bytes.size() - 8, source};
    return tail.u64();
  }();
  const std::uint64_t computed = fnv1a64(bytes.data(), bytes.size() - 8);
  if (stored != computed) fail(source + ": checksum mismatch, checkpoint is corrupt");

  detail::ByteReader r{bytes.data(), bytes.size() - 8, 0, source};
  char magic[4];
  r.raw(magic, 4);
  if (std::string_view(magic, 4) != "LFCK") fail(source + ": bad magic, not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != detail::kCheckpointVersion)
    fail(source + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  Checkpoint ckpt;
  struct PendingMoments {
    std::string name;
    std::vector<float> values;
    bool second;
  };
  std::vector<PendingMoments> pending;

  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint16_t len = r.u16();
    std::string name(len, '\0');
    r.raw(name.data(), len);
    const std::uint8_t rank = r.u8();
    std::vector<std::uint32_t> dims(rank);
    std::uint64_t numel = rank ? 1 : 0;
    for (auto& d : dims) {
      d = r.u32();
      numel *= d;
    }
    std::vector<float> payload(numel);
    for (auto& v : payload) v = r.f32();

    if (name.starts_with(detail::kMetaPrefix)) {
      const std::string rest = name.substr(std::string(detail::kMetaPrefix).size());
      const auto dot = rest.find('.');
      if (dot == std::string::npos) fail(source + ": malformed meta entry '" + name + "'");
      const std::string key = rest.substr(0, dot);
      const std::string value = rest.substr(dot + 1);
      if (key == "epoch")
        ckpt.epoch = std::atoi(value.c_str());
      else if (key == "phase")
        ckpt.phase = parse_phase(value);
      else if (key == "best_val")
        ckpt.best_validation_loss = std::strtod(value.c_str(), nullptr);
      else if (key == "step_count")
        ckpt.store.set_step_count(std::atoll(value.c_str()));
      else if (key == "fingerprint")
        ckpt.config_fingerprint = std::strtoull(value.c_str(), nullptr, 16);
      else
        fail(source + ": unknown meta key '" + key + "'");
      continue;
    }

    if (rank != 4) fail(source + ": entry '" + name + "' has unsupported rank");
    if (name.starts_with(detail::kOptM1Prefix)) {
      pending.push_back({name.substr(std::string(detail::kOptM1Prefix).size()),
                         std::move(payload), false});
      continue;
    }
    if (name.starts_with(detail::kOptM2Prefix)) {
      pending.push_back({name.substr(std::string(detail::kOptM2Prefix).size()),
                         std::move(payload), true});
      continue;
    }
    const Shape shape{static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                      static_cast<int>(dims[2]), static_cast<int>(dims[3])};
    ckpt.store.create(name, shape, std::move(payload));
  }
  if (r.pos != r.size) fail(source + ": trailing bytes after last entry");

  // Pair up m1/m2 buffers; both must exist for a parameter.
  for (std::size_t i = 0; i < pending.size(); ++i) {
    if (pending[i].second) continue;
    std::vector<float>* m2 = nullptr;
    for (auto& other : pending)
      if (other.second && other.name == pending[i].name) m2 = &other.values;
    if (!m2) fail(source + ": moment m2 missing for '" + pending[i].name + "'");
    ckpt.store.set_moments(pending[i].name, std::move(pending[i].values), std::move(*m2));
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  detail::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

}  // namespace lidarflow
