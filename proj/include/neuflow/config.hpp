#pragma once

#include "neuflow/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

namespace neuflow {

/// Every architecture hyperparameter of the network in one record.
struct NeuFlowConfig {
  int feature_dim = 90;
  int cross_attention_layers = 2;
  int self_attention_layers = 1;
  int correlation_radius = 3;
  int refinement_depth = 6;
  int refinement_width = 128;
  int upsample_branch_dim = 64;
  /// Block outputs at pyramid scales 1/1, 1/2, 1/4, 1/8 and 1/16.
  std::vector<int> per_level_channels{24, 24, 24, 24, 24};
  int fusion_hidden_dim = 128;  // 1/8 concat -> feature block
  int merge_hidden_dim = 768;   // 1/8 + 1/16 merge block
  int ffn_dim = 360;
  int mask_head_width = 128;
  int norm_groups = 8;
  double attention_temperature = 1.0;
  std::uint64_t seed = 42;

  /// Architecture used for the published parameter budget.
  static NeuFlowConfig paper() { return NeuFlowConfig{}; }

  /// Desk-scale network (feature dim 8, refinement depth 2): overfits a small
  /// synthetic set in minutes on one CPU core and is small enough for
  /// finite-difference gradient checks.
  static NeuFlowConfig tiny() {
    NeuFlowConfig c;
    c.feature_dim = 8;
    c.refinement_depth = 2;
    c.refinement_width = 32;
    c.upsample_branch_dim = 8;
    c.per_level_channels = {8, 8, 8, 8, 8};
    c.fusion_hidden_dim = 16;
    c.merge_hidden_dim = 16;
    c.ffn_dim = 32;
    c.mask_head_width = 16;
    return c;
  }

  [[nodiscard]] int level_concat_channels() const {
    return per_level_channels[0] + per_level_channels[1] + per_level_channels[2] + per_level_channels[3];
  }
  [[nodiscard]] int correlation_channels() const {
    const int win = 2 * correlation_radius + 1;
    return win * win;
  }

  void validate() const {
    auto need = [](bool ok, const char* what) {
      if (!ok) throw ConfigError(std::string("invalid config: ") + what);
    };
    need(feature_dim > 0, "feature_dim must be > 0");
    need(cross_attention_layers >= 1, "cross_attention_layers must be >= 1");
    need(self_attention_layers >= 1, "self_attention_layers must be >= 1");
    need(correlation_radius >= 1, "correlation_radius must be >= 1");
    need(refinement_depth >= 1, "refinement_depth must be >= 1");
    need(refinement_width > 0, "refinement_width must be > 0");
    need(upsample_branch_dim > 0, "upsample_branch_dim must be > 0");
    need(per_level_channels.size() == 5, "per_level_channels needs 5 entries (1/1..1/16)");
    for (int c : per_level_channels) need(c > 0, "per_level_channels entries must be > 0");
    need(fusion_hidden_dim > 0 && merge_hidden_dim > 0, "fusion/merge hidden dims must be > 0");
    need(ffn_dim > 0, "ffn_dim must be > 0");
    need(mask_head_width > 0, "mask_head_width must be > 0");
    need(norm_groups >= 1, "norm_groups must be >= 1");
    need(attention_temperature > 0.0, "attention_temperature must be > 0");
  }

  friend bool operator==(const NeuFlowConfig&, const NeuFlowConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NeuFlowConfig, feature_dim, cross_attention_layers,
                                                self_attention_layers, correlation_radius, refinement_depth,
                                                refinement_width, upsample_branch_dim, per_level_channels,
                                                fusion_hidden_dim, merge_hidden_dim, ffn_dim, mask_head_width,
                                                norm_groups, attention_temperature, seed)

/// Largest divisor of `channels` not exceeding `max_groups`.
inline int norm_groups_for(int channels, int max_groups) {
  for (int g = std::min(max_groups, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

/// Applies a flat `a.b.c=value` override to a JSON document. The value is
/// parsed as JSON when possible, otherwise stored as a string.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  std::string pointer;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    pointer += '/' + key.substr(start, dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  doc[nlohmann::json::json_pointer(pointer)] = value;
}

}  // namespace neuflow
