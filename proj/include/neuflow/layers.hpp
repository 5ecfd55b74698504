#pragma once

// Parameterized building blocks: convolution, normalization, linear layers and
// the two-convolution CNN block used throughout the backbone.

#include "neuflow/config.hpp"
#include "neuflow/ops.hpp"

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace neuflow {

/// Ordered registry of named learnable tensors.
template <class T>
class ParameterSet {
 public:
  explicit ParameterSet(std::uint64_t seed = 0) : rng_(seed) {}

  Var<T> add(std::string name, Tensor<T> init) {
    for (const auto& [n, _] : entries_) {
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    }
    Var<T> v(std::move(init), true);
    entries_.emplace_back(std::move(name), v);
    return v;
  }

  /// Uniform(-bound, bound) with bound = sqrt(3 / fan_in), i.e. unit-variance fan-in scaling.
  Var<T> add_uniform(std::string name, Shape shape, int fan_in) {
    Tensor<T> t(shape);
    const double bound = std::sqrt(3.0 / std::max(1, fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.storage()) v = static_cast<T>(dist(rng_));
    return add(std::move(name), std::move(t));
  }

  Var<T> add_constant(std::string name, Shape shape, T value) { return add(std::move(name), Tensor<T>(shape, value)); }

  [[nodiscard]] std::vector<std::pair<std::string, Var<T>>>& entries() { return entries_; }
  [[nodiscard]] const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }

  [[nodiscard]] std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> entries_;
  std::mt19937_64 rng_;
};

template <class T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  ConvGeometry geom;
  int in_channels = 0;
  int out_channels = 0;

  Conv2d() = default;
  Conv2d(ParameterSet<T>& ps, const std::string& name, int c_in, int c_out, ConvGeometry g, bool zero_init = false)
      : geom(g), in_channels(c_in), out_channels(c_out) {
    const Shape ws{c_out, c_in, g.kernel * g.kernel};
    weight = zero_init ? ps.add_constant(name + ".weight", ws, T(0))
                       : ps.add_uniform(name + ".weight", ws, c_in * g.kernel * g.kernel);
    bias = ps.add_constant(name + ".bias", Shape{c_out, 1, 1}, T(0));
  }

  Var<T> operator()(const Var<T>& x) const {
    if (x.shape().c != in_channels) {
      throw ConfigError("conv: expected " + std::to_string(in_channels) + " input channels, got " +
                        std::to_string(x.shape().c));
    }
    return conv2d(x, weight, bias, geom);
  }
};

template <class T>
struct GroupNorm {
  Var<T> gamma;
  Var<T> beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParameterSet<T>& ps, const std::string& name, int channels, int max_groups)
      : groups(norm_groups_for(channels, max_groups)) {
    gamma = ps.add_constant(name + ".gamma", Shape{channels, 1, 1}, T(1));
    beta = ps.add_constant(name + ".beta", Shape{channels, 1, 1}, T(0));
  }

  Var<T> operator()(const Var<T>& x) const { return group_norm(x, gamma, beta, groups); }
};

template <class T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& ps, const std::string& name, int channels) {
    gamma = ps.add_constant(name + ".gamma", Shape{channels, 1, 1}, T(1));
    beta = ps.add_constant(name + ".beta", Shape{channels, 1, 1}, T(0));
  }

  Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma, beta); }
};

/// Per-pixel affine map (a 1x1 convolution).
template <class T>
struct Linear {
  Conv2d<T> conv;

  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& name, int c_in, int c_out)
      : conv(ps, name, c_in, c_out, ConvGeometry{1, 1, 0}) {}

  Var<T> operator()(const Var<T>& x) const { return conv(x); }
};

/// Two convolutions, each followed by group norm and ReLU. All striding
/// happens in the first convolution; the second is 3x3, stride 1.
struct BlockSpec {
  int in_channels = 3;
  int hidden_channels = 0;  // defaults to out_channels
  int out_channels = 0;
  int stride = 1;

  /// Kernel 3 for stride 1, otherwise 2*stride with padding stride/2, so
  /// output size is exactly input / stride.
  [[nodiscard]] ConvGeometry first_geometry() const {
    if (stride == 1) return ConvGeometry{3, 1, 1};
    return ConvGeometry{2 * stride, stride, stride / 2};
  }
  [[nodiscard]] int hidden() const { return hidden_channels > 0 ? hidden_channels : out_channels; }
};

template <class T>
struct CnnBlock {
  BlockSpec spec;
  Conv2d<T> conv1;
  GroupNorm<T> norm1;
  Conv2d<T> conv2;
  GroupNorm<T> norm2;

  static constexpr int kConvolutions = 2;

  CnnBlock() = default;
  CnnBlock(ParameterSet<T>& ps, const std::string& name, BlockSpec s, int max_groups) : spec(s) {
    if (s.in_channels <= 0 || s.out_channels <= 0 || s.stride <= 0) throw ConfigError("invalid block spec: " + name);
    conv1 = Conv2d<T>(ps, name + ".conv1", s.in_channels, s.hidden(), s.first_geometry());
    norm1 = GroupNorm<T>(ps, name + ".norm1", s.hidden(), max_groups);
    conv2 = Conv2d<T>(ps, name + ".conv2", s.hidden(), s.out_channels, ConvGeometry{3, 1, 1});
    norm2 = GroupNorm<T>(ps, name + ".norm2", s.out_channels, max_groups);
  }

  Var<T> operator()(const Var<T>& x) const {
    const Shape in = x.shape();
    if (in.c != spec.in_channels) {
      throw ConfigError("cnn block: expected " + std::to_string(spec.in_channels) + " channels, got " +
                        std::to_string(in.c));
    }
    if (in.h % spec.stride != 0 || in.w % spec.stride != 0) {
      throw ConfigError("cnn block: stride " + std::to_string(spec.stride) + " does not divide " + to_string(in));
    }
    return relu(norm2(conv2(relu(norm1(conv1(x))))));
  }
};

}  // namespace neuflow
