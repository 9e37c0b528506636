// Copyright 2026 The LidarFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lidarflow/projection.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

namespace detail {

struct ByteWriter {
  std::string bytes;

  void raw(const void* data, std::size_t size) {
    bytes.append(static_cast<const char*>(data), size);
  }
  void u8(std::uint8_t v) { bytes.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void i32(std::int32_t v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
};

struct ByteReader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;
  std::string source;

  void need(std::size_t n) const {
    if (pos + n > size) fail(source + ": truncated file (wanted " + std::to_string(n) +
                             " bytes at offset " + std::to_string(pos) + ")");
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::copy(data + pos, data + pos + n, static_cast<std::uint8_t*>(out));
    pos += n;
  }
  std::uint8_t u8() {
    need(1);
    return data[pos++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(data[pos + i]) << (8 * i);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::int32_t i32() { return std::bit_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
};

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail("write failed for '" + path.string() + "'");
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail("cannot open '" + path.string() + "' for reading");
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) fail("read failed for '" + path.string() + "'");
  return bytes;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// RIMG: "RIMG" magic, little-endian u32 h, u32 w, then h*w f32 meters
// row-major. Occupancy is recomputed from zeros on load.

inline std::string encode_rimg(const RangeImage& img) {
  detail::ByteWriter w;
  w.raw("RIMG", 4);
  w.u32(static_cast<std::uint32_t>(img.h));
  w.u32(static_cast<std::uint32_t>(img.w));
  for (float r : img.ranges) w.f32(r);
  return w.bytes;
}

inline RangeImage decode_rimg(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  detail::ByteReader r{bytes.data(), bytes.size(), 0, source};
  char magic[4];
  r.raw(magic, 4);
  if (std::string_view(magic, 4) != "RIMG")
    fail(source + ": bad magic, not a RIMG file");
  RangeImage img;
  img.h = static_cast<int>(r.u32());
  img.w = static_cast<int>(r.u32());
  if (img.h <= 0 || img.w <= 0 || static_cast<std::int64_t>(img.h) * img.w > (1ll << 30))
    fail(source + ": implausible extents " + std::to_string(img.h) + "x" + std::to_string(img.w));
  const std::size_t count = static_cast<std::size_t>(img.h) * img.w;
  if (r.size - r.pos != count * 4)
    fail(source + ": payload size mismatch, expected " + std::to_string(count * 4) +
         " bytes of ranges");
  img.ranges.resize(count);
  for (auto& v : img.ranges) v = r.f32();
  return img;
}

inline void write_rimg(const std::filesystem::path& path, const RangeImage& img) {
  detail::write_file(path, encode_rimg(img));
}

inline RangeImage read_rimg(const std::filesystem::path& path) {
  return decode_rimg(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Middlebury flow files: float magic 202021.25, i32 width, i32 height, then
// interleaved (u, v) f32 pairs row-major.

inline constexpr float kFlowMagic = 202021.25f;

template <typename S>
std::string encode_flow(const Tensor<S>& flow) {
  const Shape& s = flow.shape();
  if (s.n != 1 || s.c != 2)
    fail("encode_flow: expected shape (1,2,H,W), got " + s.to_string());
  detail::ByteWriter w;
  w.f32(kFlowMagic);
  w.i32(s.w);
  w.i32(s.h);
  const auto v = flow.values();
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      w.f32(static_cast<float>(v[s.index(0, 0, y, x)]));
      w.f32(static_cast<float>(v[s.index(0, 1, y, x)]));
    }
  return w.bytes;
}

template <typename S = float>
Tensor<S> decode_flow(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  detail::ByteReader r{bytes.data(), bytes.size(), 0, source};
  const float magic = r.f32();
  if (magic != kFlowMagic)
    fail(source + ": bad magic " + std::to_string(magic) + ", not a flow file");
  const std::int32_t width = r.i32();
  const std::int32_t height = r.i32();
  if (width <= 0 || height <= 0 || static_cast<std::int64_t>(width) * height > (1ll << 30))
    fail(source + ": implausible extents " + std::to_string(width) + "x" + std::to_string(height));
  Shape s{1, 2, height, width};
  std::vector<S> values(static_cast<std::size_t>(s.numel()));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      values[static_cast<std::size_t>(s.index(0, 0, y, x))] = static_cast<S>(r.f32());
      values[static_cast<std::size_t>(s.index(0, 1, y, x))] = static_cast<S>(r.f32());
    }
  if (r.pos != r.size) fail(source + ": trailing bytes after flow payload");
  return Tensor<S>::constant(s, std::move(values));
}

template <typename S>
void write_flow(const std::filesystem::path& path, const Tensor<S>& flow) {
  detail::write_file(path, encode_flow(flow));
}

template <typename S = float>
Tensor<S> read_flow(const std::filesystem::path& path) {
  return decode_flow<S>(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Portable pixmap rendering

inline void write_pgm(const std::filesystem::path& path, int w, int h,
                      const std::vector<std::uint8_t>& gray) {
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(reinterpret_cast<const char*>(gray.data()), gray.size());
  detail::write_file(path, out);
}

inline void write_ppm(const std::filesystem::path& path, int w, int h,
                      const std::vector<std::uint8_t>& rgb) {
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
  detail::write_file(path, out);
}

/// 8-bit grayscale, linear in range / max_range.
inline std::vector<std::uint8_t> render_range(const RangeImage& img, double max_range) {
  std::vector<std::uint8_t> gray(img.ranges.size());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const double t = std::clamp(img.ranges[i] / max_range, 0.0, 1.0);
    gray[i] = static_cast<std::uint8_t>(std::lround(t * 255.0));
  }
  return gray;
}

namespace detail {

inline std::array<std::uint8_t, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  auto to8 = [m](double t) { return static_cast<std::uint8_t>(std::lround((t + m) * 255.0)); };
  return {to8(r), to8(g), to8(b)};
}

}  // namespace detail

/// Hue encodes direction, saturation magnitude; zero flow renders white.
template <typename S>
std::vector<std::uint8_t> render_flow(const Tensor<S>& flow) {
  const Shape& s = flow.shape();
  if (s.n != 1 || s.c != 2)
    fail("render_flow: expected shape (1,2,H,W), got " + s.to_string());
  const auto v = flow.values();
  double max_mag = 0;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const double u = v[s.index(0, 0, y, x)];
      const double w = v[s.index(0, 1, y, x)];
      max_mag = std::max(max_mag, std::hypot(u, w));
    }
  if (max_mag == 0) max_mag = 1;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(s.h) * s.w * 3);
  std::size_t i = 0;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const double u = v[s.index(0, 0, y, x)];
      const double w = v[s.index(0, 1, y, x)];
      const double mag = std::hypot(u, w) / max_mag;
      double ang = std::atan2(w, u) / (2.0 * std::numbers::pi);
      if (ang < 0) ang += 1.0;
      if (ang >= 1.0) ang = 0.0;
      const auto px = detail::hsv_to_rgb(ang, std::clamp(mag, 0.0, 1.0), 1.0);
      rgb[i++] = px[0];
      rgb[i++] = px[1];
      rgb[i++] = px[2];
    }
  return rgb;
}

}  // namespace lidarflow
