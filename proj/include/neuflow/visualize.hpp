#pragma once

// Flow color wheel: hue follows the flow direction atan2(v, u), saturation
// grows with magnitude / max_radius, brightness is constant. Zero flow is white.

#include "neuflow/flow.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>

namespace neuflow {

/// RGB in [0, 1] for hue in degrees, saturation in [0, 1], value 1.
inline std::array<double, 3> hsv_to_rgb(double hue_deg, double sat) {
  const double h = std::fmod(std::fmod(hue_deg, 360.0) + 360.0, 360.0) / 60.0;
  const int sector = static_cast<int>(std::floor(h)) % 6;
  const double f = h - std::floor(h);
  const double p = 1.0 - sat, q = 1.0 - sat * f, t = 1.0 - sat * (1.0 - f);
  switch (sector) {
    case 0: return {1.0, t, p};
    case 1: return {q, 1.0, p};
    case 2: return {p, 1.0, t};
    case 3: return {p, q, 1.0};
    case 4: return {t, p, 1.0};
    default: return {1.0, p, q};
  }
}

/// Color image in [-1, 1]. With no radius given, the largest magnitude in
/// the field maps to full saturation.
template <class T>
Tensor<T> flow_to_color(const FlowField<T>& flow, std::optional<double> max_radius = std::nullopt) {
  if (!flow.flow.all_finite()) throw std::invalid_argument("flow_to_color: flow contains non-finite values");
  const int h = flow.height(), w = flow.width();
  double radius = 0.0;
  if (max_radius) {
    if (!(*max_radius > 0.0)) throw std::invalid_argument("flow_to_color: max_radius must be > 0");
    radius = *max_radius;
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) radius = std::max(radius, std::hypot<double>(flow.u(y, x), flow.v(y, x)));
  }
  Tensor<T> img(3, h, w, T(1));
  if (radius == 0.0) return img;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = flow.u(y, x), v = flow.v(y, x);
      const double sat = std::min(1.0, std::hypot(u, v) / radius);
      const double hue = std::atan2(v, u) * 180.0 / M_PI;
      const auto rgb = hsv_to_rgb(hue, sat);
      for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<T>(2.0 * rgb[c] - 1.0);
    }
  return img;
}

}  // namespace neuflow
