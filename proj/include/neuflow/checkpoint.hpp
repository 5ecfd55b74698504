#pragma once

// Binary checkpoint container.
//
//   bytes 0..7    magic "NEUFLOW\0"
//   uint32        format version
//   uint32        scalar width in bytes (4 or 8)
//   uint64 + str  config record (JSON)
//   uint64 + str  metadata (JSON)
//   uint64        block count
//   per block:    uint32 name length, name, int32 c, h, w, c*h*w scalars
//   uint64        FNV-1a hash of every preceding byte
//
// All integers and scalars are little-endian.

#include "neuflow/config.hpp"
#include "neuflow/flo_io.hpp"
#include "neuflow/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace neuflow {

inline constexpr char kCheckpointMagic[8] = {'N', 'E', 'U', 'F', 'L', 'O', 'W', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  NeuFlowConfig config;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<T>>> blocks;

  [[nodiscard]] const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : blocks)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class V>
void put(std::string& out, const V& v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(V));
}

inline void put_string(std::string& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out += s;
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, std::string what) : b_(bytes), end_(end), what_(std::move(what)) {}

  template <class V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, b_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void read_into(char* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, b_.data() + pos_, n);
    pos_ += n;
  }
  [[nodiscard]] std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CorruptionError(what_ + ": truncated checkpoint");
  }
  const std::string& b_;
  std::size_t end_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <class T>
std::string encode_checkpoint(const Checkpoint<T>& ck) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, sizeof(T));
  detail::put_string(out, nlohmann::json(ck.config).dump());
  detail::put_string(out, ck.meta.dump());
  detail::put<std::uint64_t>(out, ck.blocks.size());
  for (const auto& [name, t] : ck.blocks) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::int32_t>(out, t.channels());
    detail::put<std::int32_t>(out, t.height());
    detail::put<std::int32_t>(out, t.width());
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(T));
  }
  detail::put<std::uint64_t>(out, detail::fnv1a(out.data(), out.size()));
  return out;
}

/// Decodes a checkpoint, converting stored scalars to T if needed.
template <class T>
Checkpoint<T> decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < sizeof kCheckpointMagic || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError(what + ": not a checkpoint file");
  }
  if (bytes.size() < sizeof kCheckpointMagic + 16) throw CorruptionError(what + ": truncated checkpoint");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored_hash = 0;
  std::memcpy(&stored_hash, bytes.data() + body, 8);
  detail::Reader r(bytes, body, what);
  r.get_string(8);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version));
  }
  if (stored_hash != detail::fnv1a(bytes.data(), body)) throw CorruptionError(what + ": checksum mismatch");
  const auto width = r.get<std::uint32_t>();
  if (width != 4 && width != 8) throw FormatError(what + ": unsupported scalar width");

  Checkpoint<T> ck;
  try {
    ck.config = nlohmann::json::parse(r.get_string(r.get<std::uint64_t>())).get<NeuFlowConfig>();
    ck.meta = nlohmann::json::parse(r.get_string(r.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(what + ": bad config record: " + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.get_string(r.get<std::uint32_t>());
    const auto c = r.get<std::int32_t>(), h = r.get<std::int32_t>(), w = r.get<std::int32_t>();
    if (c < 0 || h < 0 || w < 0) throw CorruptionError(what + ": negative block dimension in " + name);
    Tensor<T> t(c, h, w);
    if (width == sizeof(T)) {
      r.read_into(reinterpret_cast<char*>(t.data()), t.size() * sizeof(T));
    } else if (width == 4) {
      std::vector<float> tmp(t.size());
      r.read_into(reinterpret_cast<char*>(tmp.data()), tmp.size() * 4);
      for (std::size_t k = 0; k < tmp.size(); ++k) t[k] = static_cast<T>(tmp[k]);
    } else {
      std::vector<double> tmp(t.size());
      r.read_into(reinterpret_cast<char*>(tmp.data()), tmp.size() * 8);
      for (std::size_t k = 0; k < tmp.size(); ++k) t[k] = static_cast<T>(tmp[k]);
    }
    ck.blocks.emplace_back(std::move(name), std::move(t));
  }
  if (r.position() != body) throw CorruptionError(what + ": trailing bytes in checkpoint");
  return ck;
}

template <class T>
void write_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, encode_checkpoint(ck));
}

template <class T = float>
Checkpoint<T> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file_bytes(path), path.string());
}

/// Copies named blocks into a parameter set; every parameter must be present
/// with a matching shape.
template <class T>
void load_parameters(ParameterSet<T>& params, const Checkpoint<T>& ck, const std::string& prefix = "") {
  for (auto& [name, var] : params.entries()) {
    const Tensor<T>* t = ck.find(prefix + name);
    if (!t) throw FormatError("checkpoint lacks parameter " + prefix + name);
    require_shape(t->shape(), var.value().shape(), ("checkpoint block " + name).c_str());
    var.mutable_value() = *t;
  }
}

template <class T>
Checkpoint<T> model_checkpoint(const NeuFlow<T>& model, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint<T> ck{model.config(), std::move(meta), {}};
  for (const auto& [name, var] : model.parameters().entries()) ck.blocks.emplace_back(name, var.value());
  return ck;
}

template <class T>
void save_model(const NeuFlow<T>& model, const std::filesystem::path& path,
                nlohmann::json meta = nlohmann::json::object()) {
  write_checkpoint(model_checkpoint(model, std::move(meta)), path);
}

template <class T = float>
NeuFlow<T> model_from_checkpoint(const Checkpoint<T>& ck) {
  NeuFlow<T> model(ck.config);
  load_parameters(model.parameters(), ck);
  return model;
}

template <class T = float>
NeuFlow<T> load_model(const std::filesystem::path& path) {
  return model_from_checkpoint(read_checkpoint<T>(path));
}

}  // namespace neuflow
