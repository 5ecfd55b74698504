#pragma once

// Global matching at 1/16 scale: cross-attention feature enhancement, softmax
// correspondence over all pixel pairs, and flow propagation by feature
// self-similarity.

#include "neuflow/layers.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace neuflow {

/// Fixed 2-D sinusoidal encoding. The first half of the used channels encode
/// y, the second half x, as sin/cos pairs over geometric frequencies;
/// leftover channels (when channels % 4 != 0) stay zero.
template <class T>
Tensor<T> positional_encoding(int channels, int h, int w) {
  Tensor<T> pe(channels, h, w);
  const int freqs = channels / 4;
  if (freqs == 0) return pe;
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (int i = 0; i < freqs; ++i) {
    const double div = std::pow(10000.0, static_cast<double>(i) / freqs);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double py = (y + 1.0) / h * two_pi / div;
        const double px = (x + 1.0) / w * two_pi / div;
        pe(2 * i, y, x) = static_cast<T>(std::sin(py));
        pe(2 * i + 1, y, x) = static_cast<T>(std::cos(py));
        pe(2 * freqs + 2 * i, y, x) = static_cast<T>(std::sin(px));
        pe(2 * freqs + 2 * i + 1, y, x) = static_cast<T>(std::cos(px));
      }
  }
  return pe;
}

/// Pre-norm single-head attention followed by a two-layer feed-forward, both residual.
template <class T>
struct TransformerLayer {
  LayerNorm<T> norm1;
  Linear<T> q, k, v, out;
  LayerNorm<T> norm2;
  Linear<T> ffn1, ffn2;
  T scale = T(1);

  TransformerLayer() = default;
  TransformerLayer(ParameterSet<T>& ps, const std::string& name, int dim, int ffn_dim, double temperature)
      : norm1(ps, name + ".norm1", dim),
        q(ps, name + ".q", dim, dim),
        k(ps, name + ".k", dim, dim),
        v(ps, name + ".v", dim, dim),
        out(ps, name + ".out", dim, dim),
        norm2(ps, name + ".norm2", dim),
        ffn1(ps, name + ".ffn1", dim, ffn_dim),
        ffn2(ps, name + ".ffn2", ffn_dim, dim),
        scale(static_cast<T>(1.0 / (std::sqrt(static_cast<double>(dim)) * temperature))) {}

  /// `query` attends to `source` (keys and values).
  Var<T> operator()(const Var<T>& query, const Var<T>& source) const {
    const Var<T> nq = norm1(query);
    const Var<T> ns = norm1(source);
    const Var<T> msg = out(attention(q(nq), k(ns), v(ns), scale));
    const Var<T> x = add(query, msg);
    return add(x, ffn2(relu(ffn1(norm2(x)))));
  }
};

/// Stack of cross-attention layers applied symmetrically to both images with
/// shared weights; positional encoding is added first.
template <class T>
class CrossAttentionStack {
 public:
  CrossAttentionStack() = default;
  CrossAttentionStack(ParameterSet<T>& ps, const NeuFlowConfig& cfg) {
    for (int l = 0; l < cfg.cross_attention_layers; ++l) {
      layers_.emplace_back(ps, "cross_attention.layer" + std::to_string(l), cfg.feature_dim, cfg.ffn_dim,
                           cfg.attention_temperature);
    }
  }

  std::pair<Var<T>, Var<T>> operator()(const Var<T>& f1, const Var<T>& f2) const {
    require_shape(f2.shape(), f1.shape(), "cross attention");
    const Shape s = f1.shape();
    const Var<T> pe = constant(positional_encoding<T>(s.c, s.h, s.w));
    Var<T> a = add(f1, pe);
    Var<T> b = add(f2, pe);
    for (const auto& layer : layers_) {
      Var<T> na = layer(a, b);
      Var<T> nb = layer(b, a);
      a = std::move(na);
      b = std::move(nb);
    }
    return {a, b};
  }

  [[nodiscard]] const std::vector<TransformerLayer<T>>& layers() const { return layers_; }

 private:
  std::vector<TransformerLayer<T>> layers_;
};

/// Matching distribution m(i, j) = softmax_j(⟨f1_i, f2_j⟩ / √D).
template <class T>
RowMatrix<T> matching_distribution(const Tensor<T>& f1, const Tensor<T>& f2) {
  return attention_probabilities(f1, f2, T(1) / std::sqrt(static_cast<T>(f1.channels())));
}

/// flow(i) = Σ_j m(i, j) coord(j) - coord(i), in pixels of the feature grid.
template <class T>
Var<T> global_match(const Var<T>& f1, const Var<T>& f2) {
  require_shape(f2.shape(), f1.shape(), "global_match");
  const Shape s = f1.shape();
  const Tensor<T> grid = coordinate_grid<T>(s.h, s.w);
  Tensor<T> neg = grid;
  for (auto& v : neg.storage()) v = -v;
  const T scale = T(1) / std::sqrt(static_cast<T>(s.c));
  return add(attention(f1, f2, constant(grid), scale), constant(std::move(neg)));
}

/// Propagates flow along feature self-similarity; the output at every pixel is
/// a convex combination of input flow vectors.
template <class T>
class FlowSelfAttention {
 public:
  FlowSelfAttention() = default;
  FlowSelfAttention(ParameterSet<T>& ps, const std::string& name, int dim, double temperature)
      : q_(ps, name + ".q", dim, dim),
        k_(ps, name + ".k", dim, dim),
        scale_(static_cast<T>(1.0 / (std::sqrt(static_cast<double>(dim)) * temperature))) {}

  Var<T> operator()(const Var<T>& features, const Var<T>& flow) const {
    require_spatial(flow.shape(), features.shape(), "flow self-attention");
    if (flow.shape().c != 2) throw ShapeError("flow self-attention: flow must have 2 channels");
    return attention(q_(features), k_(features), flow, scale_);
  }

  /// Attention weights a(i, j), for inspection.
  [[nodiscard]] RowMatrix<T> weights(const Tensor<T>& features) const {
    NoGradGuard guard;
    const Var<T> f = constant(features);
    return attention_probabilities(q_(f).value(), k_(f).value(), scale_);
  }

  Linear<T>& query() { return q_; }
  Linear<T>& key() { return k_; }

 private:
  Linear<T> q_, k_;
  T scale_ = T(1);
};

/// Bilinear 2x spatial upsampling; values doubled to stay in pixels of the new grid.
template <class T>
Var<T> upsample_flow_2x(const Var<T>& flow) {
  if (flow.shape().c != 2) throw ShapeError("upsample_flow_2x: flow must have 2 channels");
  return resize_bilinear(flow, 2 * flow.shape().h, 2 * flow.shape().w, T(2));
}

}  // namespace neuflow
