#pragma once

// Middlebury .flo files: float32 magic 202021.25, int32 width, int32 height,
// then width*height interleaved (u, v) float32 pairs, row-major, little-endian.

#include "neuflow/errors.hpp"
#include "neuflow/flow.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace neuflow {

inline constexpr float kFloMagic = 202021.25f;
inline constexpr std::size_t kFloHeaderBytes = 12;

static_assert(std::endian::native == std::endian::little, ".flo I/O assumes a little-endian host");

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot replace " + path.string());
  }
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Serialized .flo bytes for a flow field.
template <class T>
std::string encode_flo(const FlowField<T>& flow) {
  const int h = flow.height(), w = flow.width();
  if (h <= 0 || w <= 0) throw ShapeError("cannot write an empty flow field");
  if (!flow.flow.all_finite()) throw std::invalid_argument("flow contains non-finite values");
  std::string bytes(kFloHeaderBytes + static_cast<std::size_t>(h) * w * 8, '\0');
  const std::int32_t dims[2] = {w, h};
  std::memcpy(bytes.data(), &kFloMagic, 4);
  std::memcpy(bytes.data() + 4, dims, 8);
  char* p = bytes.data() + kFloHeaderBytes;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float uv[2] = {static_cast<float>(flow.u(y, x)), static_cast<float>(flow.v(y, x))};
      std::memcpy(p, uv, 8);
      p += 8;
    }
  return bytes;
}

template <class T>
FlowField<T> decode_flo(const std::string& bytes, const std::string& what = "flo data") {
  if (bytes.size() < 4) throw CorruptionError(what + ": truncated header");
  float magic = 0;
  std::memcpy(&magic, bytes.data(), 4);
  if (magic != kFloMagic) throw FormatError(what + ": bad magic number");
  if (bytes.size() < kFloHeaderBytes) throw CorruptionError(what + ": truncated header");
  std::int32_t dims[2];
  std::memcpy(dims, bytes.data() + 4, 8);
  const std::int32_t w = dims[0], h = dims[1];
  if (w <= 0 || h <= 0 || w > (1 << 16) || h > (1 << 16)) {
    throw CorruptionError(what + ": invalid dimensions " + std::to_string(w) + "x" + std::to_string(h));
  }
  const std::size_t need = kFloHeaderBytes + static_cast<std::size_t>(w) * h * 8;
  if (bytes.size() < need) throw CorruptionError(what + ": truncated payload");
  if (bytes.size() > need) throw CorruptionError(what + ": trailing bytes after payload");
  FlowField<T> flow(h, w, Scale::Full);
  const char* p = bytes.data() + kFloHeaderBytes;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float uv[2];
      std::memcpy(uv, p, 8);
      p += 8;
      flow.u(y, x) = static_cast<T>(uv[0]);
      flow.v(y, x) = static_cast<T>(uv[1]);
    }
  return flow;
}

template <class T = float>
FlowField<T> read_flo(const std::filesystem::path& path) {
  return decode_flo<T>(read_file_bytes(path), path.string());
}

template <class T>
void write_flo(const FlowField<T>& flow, const std::filesystem::path& path) {
  write_file_atomic(path, encode_flo(flow));
}

}  // namespace neuflow
