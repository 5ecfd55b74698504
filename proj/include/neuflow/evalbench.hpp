#pragma once

// End-point error evaluation, latency benchmarking and report emission.

#include "neuflow/dataset.hpp"
#include "neuflow/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace neuflow {

enum class Resolution { Full, Eighth };

inline std::string to_string(Resolution r) { return r == Resolution::Full ? "full" : "eighth"; }

inline Resolution parse_resolution(const std::string& s) {
  if (s == "full") return Resolution::Full;
  if (s == "eighth") return Resolution::Eighth;
  throw ConfigError("unknown resolution: " + s + " (expected full or eighth)");
}

/// Mean over valid pixels of the Euclidean distance between flow vectors;
/// empty when no pixel is valid.
template <class T>
std::optional<double> epe(const FlowField<T>& pred, const FlowField<T>& gt, const ValidMask& valid) {
  if (pred.scale != gt.scale) throw ShapeError("epe: flows live at different scales");
  require_shape(pred.flow.shape(), gt.flow.shape(), "epe");
  if (valid.h != gt.height() || valid.w != gt.width()) throw ShapeError("epe: mask size mismatch");
  double total = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      if (!valid(y, x)) continue;
      const double du = static_cast<double>(pred.u(y, x)) - gt.u(y, x);
      const double dv = static_cast<double>(pred.v(y, x)) - gt.v(y, x);
      total += std::sqrt(du * du + dv * dv);
      ++n;
    }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

/// Mean flow magnitude over valid pixels (0 when nothing is valid).
template <class T>
double mean_magnitude(const FlowField<T>& flow, const ValidMask& valid) {
  const FlowField<T> zero(flow.height(), flow.width(), flow.scale);
  return epe(flow, zero, valid).value_or(0.0);
}

/// Ground truth on the 1/8 grid: replicate-pad to a multiple of 8, bilinear
/// downsample, divide values by 8. A coarse pixel is valid when the four
/// full-resolution pixels around its centre are valid.
template <class T>
std::pair<FlowField<T>, ValidMask> downsample_ground_truth(const FlowField<T>& gt, const ValidMask& valid) {
  const int h = gt.height(), w = gt.width();
  const int h8 = (h + 7) / 8, w8 = (w + 7) / 8;
  Tensor<T> padded(2, h8 * 8, w8 * 8);
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < h8 * 8; ++y)
      for (int x = 0; x < w8 * 8; ++x) padded(c, y, x) = gt.flow(c, std::min(y, h - 1), std::min(x, w - 1));
  FlowField<T> out(resize_bilinear(padded, h8, w8, T(1) / T(8)), Scale::Eighth);
  ValidMask m(h8, w8, true);
  for (int y = 0; y < h8; ++y)
    for (int x = 0; x < w8; ++x) {
      bool ok = true;
      for (int yy = 8 * y + 3; yy <= 8 * y + 4; ++yy)
        for (int xx = 8 * x + 3; xx <= 8 * x + 4; ++xx) ok = ok && valid(std::min(yy, h - 1), std::min(xx, w - 1));
      m.set(y, x, ok);
    }
  return {std::move(out), std::move(m)};
}

struct SampleEpe {
  std::string id;
  double epe = 0.0;
};

struct EpeReport {
  std::string dataset;
  Resolution resolution = Resolution::Full;
  double mean_epe = 0.0;
  std::vector<SampleEpe> per_sample;
  /// Samples skipped because of size mismatches or no valid pixels.
  int skipped = 0;
  std::vector<std::string> skipped_ids;
};

/// Evaluates any callable (img1, img2, output_full) -> FlowPrediction<T>.
template <class T, class Predictor>
EpeReport evaluate_with(Predictor&& predict, const Dataset<T>& data, Resolution res, std::string dataset_id) {
  if (data.empty()) throw ConfigError("evaluate: dataset is empty");
  EpeReport r{std::move(dataset_id), res, 0.0, {}, 0, {}};
  for (const auto& s : data.samples) {
    const bool dims_ok = s.img1.shape() == s.img2.shape() && s.gt.height() == s.img1.height() &&
                         s.gt.width() == s.img1.width();
    if (!dims_ok) {
      ++r.skipped;
      r.skipped_ids.push_back(s.id);
      continue;
    }
    const FlowPrediction<T> p = predict(s.img1, s.img2, res == Resolution::Full);
    std::optional<double> e;
    if (res == Resolution::Full) {
      e = epe(*p.flow_full, s.gt, s.valid);
    } else {
      const auto [gt8, valid8] = downsample_ground_truth(s.gt, s.valid);
      e = epe(p.flow8, gt8, valid8);
    }
    if (!e) {
      ++r.skipped;
      r.skipped_ids.push_back(s.id);
      continue;
    }
    r.per_sample.push_back({s.id, *e});
  }
  if (!r.per_sample.empty()) {
    double total = 0.0;
    for (const auto& p : r.per_sample) total += p.epe;
    r.mean_epe = total / static_cast<double>(r.per_sample.size());
  }
  return r;
}

template <class T>
EpeReport evaluate(const NeuFlow<T>& model, const Dataset<T>& data, Resolution res, std::string dataset_id) {
  return evaluate_with(
      [&](const Tensor<T>& a, const Tensor<T>& b, bool full) { return model.forward(a, b, full); }, data, res,
      std::move(dataset_id));
}

struct BenchReport {
  int height = 0;
  int width = 0;
  bool output_full = false;
  int warmup_runs = 0;
  int timed_runs = 0;
  std::vector<double> samples;  // seconds per forward
  double mean = 0.0;
  double median = 0.0;
  double p95 = 0.0;
  std::size_t params = 0;
};

/// Nearest-rank percentile of an unsorted sample.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Wall-clock latency of forward() on random inputs. Computation is
/// synchronous on the CPU, so each timed region ends with its results ready.
template <class T>
BenchReport benchmark(const NeuFlow<T>& model, int height, int width, bool output_full, int runs = 10,
                      int warmup = 3, std::uint64_t seed = 0) {
  if (runs < 10) throw ConfigError("benchmark needs at least 10 timed runs");
  if (warmup < 3) throw ConfigError("benchmark needs at least 3 warmup runs");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  Tensor<T> a(3, height, width), b(3, height, width);
  for (auto& v : a.storage()) v = static_cast<T>(dist(rng));
  for (auto& v : b.storage()) v = static_cast<T>(dist(rng));

  BenchReport r;
  r.height = height;
  r.width = width;
  r.output_full = output_full;
  r.warmup_runs = warmup;
  r.timed_runs = runs;
  r.params = model.parameter_count();
  volatile double sink = 0.0;
  for (int i = 0; i < warmup; ++i) sink = sink + model.forward(a, b, output_full).flow8.flow[0];
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto p = model.forward(a, b, output_full);
    const auto t1 = std::chrono::steady_clock::now();
    sink = sink + p.flow8.flow[0];
    r.samples.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  r.mean = std::accumulate(r.samples.begin(), r.samples.end(), 0.0) / static_cast<double>(runs);
  r.median = median(r.samples);
  r.p95 = percentile(r.samples, 0.95);
  return r;
}

inline nlohmann::json to_json(const EpeReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& p : r.per_sample) per.push_back({{"id", p.id}, {"epe", p.epe}});
  return {{"type", "epe"},         {"dataset", r.dataset}, {"resolution", to_string(r.resolution)},
          {"mean_epe", r.mean_epe}, {"samples", r.per_sample.size()}, {"skipped", r.skipped},
          {"per_sample", per}};
}

inline nlohmann::json to_json(const BenchReport& r) {
  return {{"type", "bench"},
          {"height", r.height},
          {"width", r.width},
          {"resolution", r.output_full ? "full" : "eighth"},
          {"warmup_runs", r.warmup_runs},
          {"timed_runs", r.timed_runs},
          {"mean_s", r.mean},
          {"median_s", r.median},
          {"p95_s", r.p95},
          {"params", r.params},
          {"samples_s", r.samples}};
}

inline void write_table(std::ostream& os, const BenchReport& r) {
  os << "size        " << r.width << "x" << r.height << "\n"
     << "resolution  " << (r.output_full ? "full" : "eighth") << "\n"
     << "runs        " << r.timed_runs << " (warmup " << r.warmup_runs << ")\n"
     << std::fixed << std::setprecision(4) << "mean        " << r.mean << " s\n"
     << "median      " << r.median << " s\n"
     << "p95         " << r.p95 << " s\n"
     << "params      " << r.params << "\n";
  os.unsetf(std::ios::floatfield);
}

inline void write_table(std::ostream& os, const EpeReport& r) {
  os << "dataset     " << r.dataset << "\n"
     << "resolution  " << to_string(r.resolution) << "\n"
     << "samples     " << r.per_sample.size() << " (skipped " << r.skipped << ")\n"
     << std::fixed << std::setprecision(4) << "mean EPE    " << r.mean_epe << " px\n";
  os.unsetf(std::ios::floatfield);
}

/// One row of EPE-versus-latency scatter data.
struct ScatterPoint {
  std::string name;
  std::size_t params = 0;
  double epe = 0.0;
  double latency_s = 0.0;
};

inline void write_scatter_csv(std::ostream& os, const std::vector<ScatterPoint>& points) {
  os << "name,params,epe,latency_s\n";
  for (const auto& p : points) os << p.name << ',' << p.params << ',' << p.epe << ',' << p.latency_s << '\n';
}

inline void write_per_sample_csv(std::ostream& os, const EpeReport& r) {
  os << "id,epe\n";
  for (const auto& p : r.per_sample) os << p.id << ',' << p.epe << '\n';
}

}  // namespace neuflow
