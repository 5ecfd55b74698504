#pragma once

// Flow fields, validity masks and pixel coordinate grids.

#include "neuflow/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace neuflow {

/// Resolution a flow field lives at. Flow values are pixels at that resolution.
enum class Scale { Sixteenth = 16, Eighth = 8, Full = 1 };

inline int downsample_factor(Scale s) { return static_cast<int>(s); }

inline std::string to_string(Scale s) {
  switch (s) {
    case Scale::Sixteenth: return "1/16";
    case Scale::Eighth: return "1/8";
    case Scale::Full: return "1/1";
  }
  return "?";
}

/// Dense displacement map; channel 0 is u (x), channel 1 is v (y).
template <class T>
struct FlowField {
  Tensor<T> flow;
  Scale scale = Scale::Full;

  FlowField() = default;
  FlowField(Tensor<T> f, Scale s) : flow(std::move(f)), scale(s) {
    if (flow.channels() != 2) throw ShapeError("FlowField requires 2 channels, got " + to_string(flow.shape()));
  }
  FlowField(int h, int w, Scale s) : flow(2, h, w), scale(s) {}

  [[nodiscard]] int height() const { return flow.height(); }
  [[nodiscard]] int width() const { return flow.width(); }
  T& u(int y, int x) { return flow(0, y, x); }
  T& v(int y, int x) { return flow(1, y, x); }
  [[nodiscard]] const T& u(int y, int x) const { return flow(0, y, x); }
  [[nodiscard]] const T& v(int y, int x) const { return flow(1, y, x); }
};

/// Per-pixel indicator of where ground truth is defined.
struct ValidMask {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> data;

  ValidMask() = default;
  ValidMask(int h_, int w_, bool value = true)
      : h(h_), w(w_), data(static_cast<std::size_t>(h_) * w_, value ? 1 : 0) {}

  [[nodiscard]] bool operator()(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x] != 0; }
  void set(int y, int x, bool v) { data[static_cast<std::size_t>(y) * w + x] = v ? 1 : 0; }
  [[nodiscard]] std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }
};

/// coords(0, y, x) = x, coords(1, y, x) = y.
template <class T>
Tensor<T> coordinate_grid(int h, int w) {
  Tensor<T> g(2, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      g(0, y, x) = static_cast<T>(x);
      g(1, y, x) = static_cast<T>(y);
    }
  }
  return g;
}

}  // namespace neuflow
