#pragma once

// Synthetic image pairs with exact ground-truth flow. Textures are smooth
// procedural value noise evaluated in continuous coordinates, so the second
// image is the first one seen through a known affine motion with no
// resampling error in the ground truth.

#include "neuflow/flow.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

namespace neuflow {

template <class T>
struct FlowSample {
  Tensor<T> img1;
  Tensor<T> img2;
  FlowField<T> gt;
  ValidMask valid;
  std::string id;
};

/// x -> A x + b in pixel coordinates (x right, y down).
struct AffineMotion {
  std::array<double, 4> a{1.0, 0.0, 0.0, 1.0};  // row-major 2x2
  std::array<double, 2> b{0.0, 0.0};

  static AffineMotion translation(double tx, double ty) { return AffineMotion{{1.0, 0.0, 0.0, 1.0}, {tx, ty}}; }
  static AffineMotion identity() { return AffineMotion{}; }

  [[nodiscard]] std::array<double, 2> apply(double x, double y) const {
    return {a[0] * x + a[1] * y + b[0], a[2] * x + a[3] * y + b[1]};
  }
  [[nodiscard]] std::array<double, 2> inverse_apply(double px, double py) const {
    const double det = a[0] * a[3] - a[1] * a[2];
    const double dx = px - b[0], dy = py - b[1];
    return {(a[3] * dx - a[1] * dy) / det, (-a[2] * dx + a[0] * dy) / det};
  }
};

enum class MotionKind { Translation, Affine, Mixed };

/// Multi-octave value noise, three channels, values roughly in [-1, 1].
class ProceduralTexture {
 public:
  explicit ProceduralTexture(std::uint64_t seed) : seed_(seed) {}

  [[nodiscard]] double sample(int channel, double x, double y) const {
    static constexpr std::array<double, 3> kCell{24.0, 12.0, 6.0};
    static constexpr std::array<double, 3> kAmp{0.6, 0.3, 0.12};
    double v = 0.0;
    for (std::size_t o = 0; o < kCell.size(); ++o) v += kAmp[o] * noise(channel, o, x / kCell[o], y / kCell[o]);
    return std::clamp(v, -1.0, 1.0);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  [[nodiscard]] double lattice(int channel, std::size_t octave, long ix, long iy) const {
    std::uint64_t h = mix(seed_ ^ mix(static_cast<std::uint64_t>(channel) * 131 + octave));
    h = mix(h ^ static_cast<std::uint64_t>(ix));
    h = mix(h ^ static_cast<std::uint64_t>(iy));
    return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
  }

  static double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

  [[nodiscard]] double noise(int channel, std::size_t octave, double x, double y) const {
    const double fx = std::floor(x), fy = std::floor(y);
    const long ix = static_cast<long>(fx), iy = static_cast<long>(fy);
    const double tx = fade(x - fx), ty = fade(y - fy);
    const double v00 = lattice(channel, octave, ix, iy), v10 = lattice(channel, octave, ix + 1, iy);
    const double v01 = lattice(channel, octave, ix, iy + 1), v11 = lattice(channel, octave, ix + 1, iy + 1);
    return (1 - ty) * ((1 - tx) * v00 + tx * v10) + ty * ((1 - tx) * v01 + tx * v11);
  }

  std::uint64_t seed_;
};

/// One pair under `motion`: img2(A x + b) = img1(x).
template <class T>
FlowSample<T> make_synthetic_pair(std::uint64_t texture_seed, int height, int width, const AffineMotion& motion,
                                  std::string id) {
  const ProceduralTexture tex(texture_seed);
  FlowSample<T> s{Tensor<T>(3, height, width), Tensor<T>(3, height, width), FlowField<T>(height, width, Scale::Full),
                  ValidMask(height, width, false), std::move(id)};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const auto src = motion.inverse_apply(x, y);
      const auto dst = motion.apply(x, y);
      for (int c = 0; c < 3; ++c) {
        s.img1(c, y, x) = static_cast<T>(tex.sample(c, x, y));
        s.img2(c, y, x) = static_cast<T>(tex.sample(c, src[0], src[1]));
      }
      s.gt.u(y, x) = static_cast<T>(dst[0] - x);
      s.gt.v(y, x) = static_cast<T>(dst[1] - y);
      s.valid.set(y, x, dst[0] >= 0.0 && dst[0] <= width - 1.0 && dst[1] >= 0.0 && dst[1] <= height - 1.0);
    }
  return s;
}

struct SyntheticOptions {
  double max_translation = 16.0;
  double max_linear = 0.05;  // |A - I| entries
  /// Every n-th pair (starting with the first) is an identity pair; 0 disables.
  int identity_every = 4;
};

/// `count` pairs of size x size. `Mixed` alternates translations and affines.
template <class T>
std::vector<FlowSample<T>> generate_synthetic(std::uint64_t seed, int count, int size, MotionKind motion,
                                              SyntheticOptions opts = {}) {
  if (size <= 0 || size % 16 != 0) throw ConfigError("synthetic size must be a positive multiple of 16");
  if (count < 1) throw ConfigError("synthetic count must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> shift(-opts.max_translation, opts.max_translation);
  std::uniform_real_distribution<double> lin(-opts.max_linear, opts.max_linear);
  std::vector<FlowSample<T>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t tex_seed = rng();
    AffineMotion m;
    const bool identity = opts.identity_every > 0 && i % opts.identity_every == 0;
    const bool affine = motion == MotionKind::Affine || (motion == MotionKind::Mixed && i % 2 == 1);
    if (identity) {
      m = AffineMotion::identity();
    } else if (affine) {
      m.a = {1.0 + lin(rng), lin(rng), lin(rng), 1.0 + lin(rng)};
      // Keep the image centre's displacement within the translation range.
      const double c = (size - 1) / 2.0;
      const double tx = 0.5 * shift(rng), ty = 0.5 * shift(rng);
      m.b = {c + tx - (m.a[0] * c + m.a[1] * c), c + ty - (m.a[2] * c + m.a[3] * c)};
    } else {
      m = AffineMotion::translation(shift(rng), shift(rng));
    }
    char id[32];
    std::snprintf(id, sizeof id, "syn-%04d", i);
    out.push_back(make_synthetic_pair<T>(tex_seed, size, size, m, id));
  }
  return out;
}

}  // namespace neuflow
