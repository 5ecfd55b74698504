#pragma once

// Dataset ingestion for the chairs and Sintel directory layouts and for
// in-memory synthetic data.
//
// chairs:  <root>/NNNNN_img1.ppm, NNNNN_img2.ppm, NNNNN_flow.flo, and an
//          optional NNNNN_valid.png mask. An optional FlyingChairs_train_val.txt
//          (one 1=train / 2=val label per sample) selects the split.
// sintel:  <root>/<pass>/<scene>/frame_NNNN.png and <root>/flow/<scene>/frame_NNNN.flo;
//          frame k and k+1 form a pair supervised by flow k.

#include "neuflow/flo_io.hpp"
#include "neuflow/image_io.hpp"
#include "neuflow/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

namespace neuflow {

enum class Layout { Chairs, Sintel, Synthetic };
enum class Split { Train, Val };

inline std::string to_string(Layout l) {
  switch (l) {
    case Layout::Chairs: return "chairs";
    case Layout::Sintel: return "sintel";
    case Layout::Synthetic: return "synthetic";
  }
  return "?";
}

inline Layout parse_layout(const std::string& s) {
  if (s == "chairs") return Layout::Chairs;
  if (s == "sintel") return Layout::Sintel;
  if (s == "synthetic") return Layout::Synthetic;
  throw ConfigError("unknown dataset layout: " + s);
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  throw ConfigError("unknown split: " + s);
}

struct DatasetSpec {
  std::filesystem::path root;
  Layout layout = Layout::Chairs;
  Split split = Split::Train;
  std::optional<int> limit;
  /// Sintel render pass: "clean" or "final".
  std::string pass = "clean";
  /// Synthetic layout only.
  std::uint64_t seed = 7;
  int count = 16;
  int size = 128;
  MotionKind motion = MotionKind::Mixed;

  void validate() const {
    if (limit && *limit < 1) throw ConfigError("dataset limit must be >= 1");
    if (layout == Layout::Sintel && pass != "clean" && pass != "final") {
      throw ConfigError("sintel pass must be clean or final, got " + pass);
    }
  }
};

template <class T>
struct Dataset {
  std::vector<FlowSample<T>> samples;
  /// Triples with missing or unreadable files; those samples were skipped.
  std::vector<std::string> errors;
  std::vector<std::string> warnings;

  [[nodiscard]] std::size_t size() const { return samples.size(); }
  [[nodiscard]] bool empty() const { return samples.empty(); }
  const FlowSample<T>& operator[](std::size_t i) const { return samples[i]; }
};

/// Flow values beyond this magnitude mark unknown ground truth.
inline constexpr double kUnknownFlowThreshold = 1e9;

template <class T>
ValidMask finite_flow_mask(const FlowField<T>& gt) {
  ValidMask m(gt.height(), gt.width(), true);
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      const double u = gt.u(y, x), v = gt.v(y, x);
      const bool ok = std::isfinite(u) && std::isfinite(v) && std::abs(u) < kUnknownFlowThreshold &&
                      std::abs(v) < kUnknownFlowThreshold;
      m.set(y, x, ok);
    }
  return m;
}

namespace detail {

template <class T>
bool check_sample_dims(const FlowSample<T>& s, std::vector<std::string>& errors) {
  if (s.img1.shape() != s.img2.shape() || s.gt.height() != s.img1.height() || s.gt.width() != s.img1.width()) {
    errors.push_back(s.id + ": image and flow sizes differ");
    return false;
  }
  return true;
}

/// Labels from FlyingChairs_train_val.txt, or nothing if the file is absent.
inline std::optional<std::vector<int>> read_split_file(const std::filesystem::path& root) {
  const auto path = root / "FlyingChairs_train_val.txt";
  if (!std::filesystem::exists(path)) return std::nullopt;
  std::ifstream in(path);
  std::vector<int> labels;
  int v = 0;
  while (in >> v) labels.push_back(v);
  return labels;
}

template <class T>
void load_chairs(const DatasetSpec& spec, Dataset<T>& out) {
  namespace fs = std::filesystem;
  static const std::regex pattern(R"((\d+)_(img1\.ppm|img2\.ppm|flow\.flo))");
  std::map<std::string, int> seen;  // id -> bitmask of present files
  for (const auto& entry : fs::directory_iterator(spec.root)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (!entry.is_regular_file() || !std::regex_match(name, m, pattern)) continue;
    const int bit = m[2] == "img1.ppm" ? 1 : (m[2] == "img2.ppm" ? 2 : 4);
    seen[m[1]] |= bit;
  }
  const auto labels = read_split_file(spec.root);
  const int want = spec.split == Split::Train ? 1 : 2;
  int index = 0;
  for (const auto& [id, bits] : seen) {
    const int position = index++;
    if (labels && (position >= static_cast<int>(labels->size()) || (*labels)[position] != want)) continue;
    if (bits != 7) {
      std::string missing;
      if (!(bits & 1)) missing += " " + id + "_img1.ppm";
      if (!(bits & 2)) missing += " " + id + "_img2.ppm";
      if (!(bits & 4)) missing += " " + id + "_flow.flo";
      out.errors.push_back(id + ": missing" + missing);
      continue;
    }
    try {
      FlowSample<T> s{read_image<T>(spec.root / (id + "_img1.ppm")), read_image<T>(spec.root / (id + "_img2.ppm")),
                      read_flo<T>(spec.root / (id + "_flow.flo")), ValidMask(), id};
      if (!check_sample_dims(s, out.errors)) continue;
      s.valid = finite_flow_mask(s.gt);
      const auto mask_path = spec.root / (id + "_valid.png");
      if (fs::exists(mask_path)) {
        const cv::Mat m = read_mask_image(mask_path);
        if (m.rows != s.gt.height() || m.cols != s.gt.width()) {
          out.errors.push_back(id + ": valid mask size differs from flow");
          continue;
        }
        for (int y = 0; y < m.rows; ++y)
          for (int x = 0; x < m.cols; ++x)
            if (m.at<std::uint8_t>(y, x) == 0) s.valid.set(y, x, false);
      }
      out.samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      out.errors.push_back(id + ": " + e.what());
    }
    if (spec.limit && static_cast<int>(out.samples.size()) >= *spec.limit) break;
  }
}

template <class T>
void load_sintel(const DatasetSpec& spec, Dataset<T>& out) {
  namespace fs = std::filesystem;
  const fs::path image_root = spec.root / spec.pass;
  const fs::path flow_root = spec.root / "flow";
  if (!fs::is_directory(image_root)) {
    out.warnings.push_back("no " + spec.pass + " pass directory under " + spec.root.string());
    return;
  }
  std::vector<std::string> scenes;
  for (const auto& e : fs::directory_iterator(image_root))
    if (e.is_directory()) scenes.push_back(e.path().filename().string());
  std::sort(scenes.begin(), scenes.end());
  static const std::regex frame_pattern(R"(frame_(\d+)\.png)");
  for (const auto& scene : scenes) {
    std::vector<std::string> frames;
    for (const auto& e : fs::directory_iterator(image_root / scene)) {
      const std::string name = e.path().filename().string();
      if (std::regex_match(name, frame_pattern)) frames.push_back(name);
    }
    std::sort(frames.begin(), frames.end());
    for (std::size_t i = 0; i + 1 < frames.size(); ++i) {
      const std::string stem = frames[i].substr(0, frames[i].size() - 4);
      const std::string id = scene + "/" + stem;
      const fs::path flow_path = flow_root / scene / (stem + ".flo");
      if (!fs::exists(flow_path)) {
        out.errors.push_back(id + ": missing " + flow_path.string());
        continue;
      }
      try {
        FlowSample<T> s{read_image<T>(image_root / scene / frames[i]), read_image<T>(image_root / scene / frames[i + 1]),
                        read_flo<T>(flow_path), ValidMask(), id};
        if (!check_sample_dims(s, out.errors)) continue;
        s.valid = ValidMask(s.gt.height(), s.gt.width(), true);
        out.samples.push_back(std::move(s));
      } catch (const std::exception& e) {
        out.errors.push_back(id + ": " + e.what());
      }
      if (spec.limit && static_cast<int>(out.samples.size()) >= *spec.limit) return;
    }
  }
}

}  // namespace detail

/// Samples in lexicographic id order. Missing files are reported in
/// `errors` and skipped; an empty root yields an empty set with a warning.
template <class T = float>
Dataset<T> load_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset<T> out;
  if (spec.layout == Layout::Synthetic) {
    const int n = spec.limit ? *spec.limit : spec.count;
    // The validation split draws from an independent stream.
    const std::uint64_t seed = spec.split == Split::Train ? spec.seed : spec.seed ^ 0x5eed5eed5eedULL;
    out.samples = generate_synthetic<T>(seed, n, spec.size, spec.motion);
    return out;
  }
  if (!std::filesystem::is_directory(spec.root)) throw IoError("dataset root not found: " + spec.root.string());
  if (spec.layout == Layout::Chairs) {
    detail::load_chairs(spec, out);
  } else {
    detail::load_sintel(spec, out);
  }
  std::sort(out.samples.begin(), out.samples.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  if (out.samples.empty() && out.errors.empty() && out.warnings.empty()) {
    out.warnings.push_back("no samples found under " + spec.root.string());
  }
  return out;
}

/// Writes samples in the chairs layout with a valid-mask PNG per sample.
template <class T>
void write_chairs(const std::vector<FlowSample<T>>& samples, const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    const auto& s = samples[i];
    write_image(s.img1, root / (std::string(stem) + "_img1.ppm"));
    write_image(s.img2, root / (std::string(stem) + "_img2.ppm"));
    write_flo(s.gt, root / (std::string(stem) + "_flow.flo"));
    cv::Mat mask(s.valid.h, s.valid.w, CV_8UC1);
    for (int y = 0; y < s.valid.h; ++y)
      for (int x = 0; x < s.valid.w; ++x) mask.at<std::uint8_t>(y, x) = s.valid(y, x) ? 255 : 0;
    if (!cv::imwrite((root / (std::string(stem) + "_valid.png")).string(), mask)) {
      throw IoError("cannot write mask for sample " + std::string(stem));
    }
  }
}

}  // namespace neuflow
