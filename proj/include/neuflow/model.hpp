#pragma once

// Full pipeline: backbone -> cross-attention -> global matching -> flow
// self-attention -> 2x upsample -> warp + local correlation refinement ->
// convex upsampling.

#include "neuflow/attention.hpp"
#include "neuflow/backbone.hpp"
#include "neuflow/refinement.hpp"
#include "neuflow/upsampler.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace neuflow {

inline constexpr int kPadMultiple = 16;
inline constexpr int kMinPaddedSize = 32;

/// Flow outputs cropped back to the caller's image size.
template <class T>
struct FlowPrediction {
  FlowField<T> flow16;
  FlowField<T> flow8;
  std::optional<FlowField<T>> flow_full;
  /// Pipeline stages that ran, in order.
  std::vector<std::string> stages;
};

/// Differentiable outputs on the padded grid, as used by the training loss.
template <class T>
struct FlowGraph {
  Var<T> flow16;
  Var<T> flow8;
  Var<T> flow_full;  // undefined on the 1/8 path
  PadSpec pad;
  std::vector<std::string> stages;
};

/// A frame that went through the backbone once.
template <class T>
struct EncodedFrame {
  Tensor<T> padded;
  PadSpec pad;
  FeaturePyramid<T> features;
};

/// Cached backbone output of the previous frame in a stream.
template <class T>
struct StreamState {
  std::optional<EncodedFrame<T>> previous;
};

template <class T>
class NeuFlow {
 public:
  explicit NeuFlow(NeuFlowConfig cfg = NeuFlowConfig::paper()) : config_(std::move(cfg)), params_(config_.seed) {
    config_.validate();
    backbone_ = Backbone<T>(params_, config_);
    cross_ = CrossAttentionStack<T>(params_, config_);
    for (int l = 0; l < config_.self_attention_layers; ++l) {
      self_attention_.emplace_back(params_, "self_attention.layer" + std::to_string(l), config_.feature_dim,
                                   config_.attention_temperature);
    }
    refiner_ = Refiner<T>(params_, config_);
    mask_head_ = MaskHead<T>(params_, config_);
  }

  // Layers hold handles into the parameter set; copies would alias weights.
  NeuFlow(const NeuFlow&) = delete;
  NeuFlow& operator=(const NeuFlow&) = delete;
  NeuFlow(NeuFlow&&) noexcept = default;
  NeuFlow& operator=(NeuFlow&&) noexcept = default;

  [[nodiscard]] const NeuFlowConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  [[nodiscard]] const ParameterSet<T>& parameters() const { return params_; }
  [[nodiscard]] const Backbone<T>& backbone() const { return backbone_; }
  [[nodiscard]] const CrossAttentionStack<T>& cross_attention() const { return cross_; }
  [[nodiscard]] const Refiner<T>& refiner() const { return refiner_; }
  [[nodiscard]] const MaskHead<T>& mask_head() const { return mask_head_; }
  [[nodiscard]] std::size_t parameter_count() const { return params_.count(); }

  /// Pads and runs the backbone on one image.
  EncodedFrame<T> encode(const Tensor<T>& image) const {
    if (image.channels() != 3) throw ShapeError("image must have 3 channels, got " + to_string(image.shape()));
    auto [padded, pad] = pad_to_multiple(image, kPadMultiple);
    if (padded.height() < kMinPaddedSize || padded.width() < kMinPaddedSize) {
      throw ShapeError("image too small: padded size must be at least 32x32, got " + to_string(padded.shape()));
    }
    EncodedFrame<T> f{std::move(padded), pad, {}};
    f.features = backbone_.extract_features(f.padded);
    return f;
  }

  /// Runs everything after the backbone. Records a graph when grad mode is on.
  FlowGraph<T> predict(EncodedFrame<T>& one, const EncodedFrame<T>& two, bool output_full) const {
    if (one.padded.shape() != two.padded.shape() || one.pad != two.pad) {
      throw ShapeError("images differ in size: " + to_string(one.padded.shape()) + " vs " +
                       to_string(two.padded.shape()));
    }
    FlowGraph<T> g;
    g.pad = one.pad;
    g.stages.emplace_back("backbone");

    auto [a16, b16] = cross_(one.features.feat16, two.features.feat16);
    g.stages.emplace_back("cross_attention");
    Var<T> flow16 = global_match(a16, b16);
    g.stages.emplace_back("global_match");

    const Shape s16 = a16.shape();
    const Var<T> keyed = add(a16, constant(positional_encoding<T>(s16.c, s16.h, s16.w)));
    for (const auto& sa : self_attention_) flow16 = sa(keyed, flow16);
    g.stages.emplace_back("self_attention");
    g.flow16 = flow16;

    const Var<T> coarse8 = upsample_flow_2x(flow16);
    g.stages.emplace_back("upsample_2x");
    const Var<T> warped = warp(two.features.feat8, coarse8);
    g.stages.emplace_back("warp");
    const auto corr = correlate(one.features.feat8, warped, config_.correlation_radius);
    g.stages.emplace_back("local_correlation");
    g.flow8 = refiner_(corr, one.features.feat8, coarse8);
    g.stages.emplace_back("refine");

    if (output_full) {
      if (!one.features.feat8_up.defined()) {
        one.features.feat8_up = backbone_.extract_upsample_features(one.padded);
      }
      g.stages.emplace_back("upsample_features");
      const auto mask = mask_head_(one.features.feat8_up, g.flow8);
      g.stages.emplace_back("predict_mask");
      g.flow_full = convex_upsample(g.flow8, mask);
      g.stages.emplace_back("convex_upsample");
    }
    return g;
  }

  /// Differentiable forward on the padded grid.
  FlowGraph<T> forward_graph(const Tensor<T>& img1, const Tensor<T>& img2, bool output_full) const {
    if (img1.shape() != img2.shape()) {
      throw ShapeError("images differ in size: " + to_string(img1.shape()) + " vs " + to_string(img2.shape()));
    }
    EncodedFrame<T> one = encode(img1);
    const EncodedFrame<T> two = encode(img2);
    return predict(one, two, output_full);
  }

  /// Inference: no graph, outputs cropped to the input size.
  FlowPrediction<T> forward(const Tensor<T>& img1, const Tensor<T>& img2, bool output_full) const {
    NoGradGuard guard;
    return crop_prediction(forward_graph(img1, img2, output_full));
  }

  /// Streaming inference: only `next` goes through the backbone; the previous
  /// frame's features come from `state`. The first call only primes the state.
  std::pair<std::optional<FlowPrediction<T>>, StreamState<T>> forward_stream(StreamState<T> state,
                                                                             const Tensor<T>& next,
                                                                             bool output_full) const {
    NoGradGuard guard;
    EncodedFrame<T> incoming = encode(next);
    std::optional<FlowPrediction<T>> result;
    if (state.previous) {
      if (state.previous->padded.shape() != incoming.padded.shape() || state.previous->pad != incoming.pad) {
        throw ShapeError("stream frame size changed");
      }
      result = crop_prediction(predict(*state.previous, incoming, output_full));
    }
    state.previous = std::move(incoming);
    return {std::move(result), std::move(state)};
  }

  static FlowPrediction<T> crop_prediction(const FlowGraph<T>& g) {
    NoGradGuard guard;
    const int h = g.pad.original_h, w = g.pad.original_w;
    FlowPrediction<T> p;
    p.flow16 = FlowField<T>(crop(g.flow16, (h + 15) / 16, (w + 15) / 16).value(), Scale::Sixteenth);
    p.flow8 = FlowField<T>(crop(g.flow8, (h + 7) / 8, (w + 7) / 8).value(), Scale::Eighth);
    if (g.flow_full.defined()) p.flow_full = FlowField<T>(crop(g.flow_full, h, w).value(), Scale::Full);
    p.stages = g.stages;
    return p;
  }

 private:
  NeuFlowConfig config_;
  ParameterSet<T> params_;
  Backbone<T> backbone_;
  CrossAttentionStack<T> cross_;
  std::vector<FlowSelfAttention<T>> self_attention_;
  Refiner<T> refiner_;
  MaskHead<T> mask_head_;
};

/// Exact number of learnable scalars for a configuration.
inline std::size_t parameter_count(const NeuFlowConfig& cfg) { return NeuFlow<float>(cfg).parameter_count(); }

}  // namespace neuflow
