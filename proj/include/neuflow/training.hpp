#pragma once

// Multi-scale supervised training: loss, AdamW with cosine decay and
// gradient-norm clipping, deterministic batching, checkpointing and logging.

#include "neuflow/checkpoint.hpp"
#include "neuflow/evalbench.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace neuflow {

struct LossWeights {
  double w16 = 0.2;
  double w8 = 0.5;
  double wfull = 1.0;
};

struct LossBreakdown {
  double l16 = 0.0;
  double l8 = 0.0;
  double lfull = 0.0;
  double total = 0.0;
  LossWeights weights;
  /// Set when the sample had no valid pixel; every term is then zero.
  bool no_valid_pixels = false;
};

template <class T>
struct LossTerms {
  Var<T> total;
  LossBreakdown parts;
};

/// Bilinear upsampling of a 1/factor flow grid to the image size, values
/// scaled by `factor`. Only the ceil(size/factor) cells covering the image are used.
template <class T>
Var<T> flow_to_full_resolution(const Var<T>& flow, int factor, int height, int width) {
  const int hs = (height + factor - 1) / factor, ws = (width + factor - 1) / factor;
  const Var<T> covering = crop(flow, hs, ws);
  if (factor == 1) return covering;
  return crop(resize_bilinear(covering, hs * factor, ws * factor, static_cast<T>(factor)), height, width);
}

template <class T>
LossTerms<T> multiscale_loss(const Var<T>& flow16, const Var<T>& flow8, const Var<T>& flow_full,
                             const FlowField<T>& gt, const ValidMask& valid, LossWeights w = {}) {
  const int h = gt.height(), wd = gt.width();
  if (valid.h != h || valid.w != wd) throw ShapeError("multiscale_loss: mask size differs from ground truth");
  if (!flow_full.defined()) throw ShapeError("multiscale_loss: full-resolution prediction missing");
  const Var<T> l16 = masked_l1(flow_to_full_resolution(flow16, 16, h, wd), gt.flow, valid);
  const Var<T> l8 = masked_l1(flow_to_full_resolution(flow8, 8, h, wd), gt.flow, valid);
  const Var<T> lf = masked_l1(flow_to_full_resolution(flow_full, 1, h, wd), gt.flow, valid);
  LossTerms<T> out;
  out.total = add(add(scale(l16, static_cast<T>(w.w16)), scale(l8, static_cast<T>(w.w8))),
                  scale(lf, static_cast<T>(w.wfull)));
  out.parts.l16 = static_cast<double>(l16.value()[0]);
  out.parts.l8 = static_cast<double>(l8.value()[0]);
  out.parts.lfull = static_cast<double>(lf.value()[0]);
  out.parts.total = static_cast<double>(out.total.value()[0]);
  out.parts.weights = w;
  out.parts.no_valid_pixels = valid.count() == 0;
  return out;
}

/// Differentiable loss on a padded-grid forward pass.
template <class T>
LossTerms<T> multiscale_loss(const FlowGraph<T>& g, const FlowField<T>& gt, const ValidMask& valid,
                             LossWeights w = {}) {
  if (gt.height() != g.pad.original_h || gt.width() != g.pad.original_w) {
    throw ShapeError("multiscale_loss: ground truth does not match the input image size");
  }
  return multiscale_loss(g.flow16, g.flow8, g.flow_full, gt, valid, w);
}

/// Loss values for an already cropped prediction.
template <class T>
LossBreakdown multiscale_loss(const FlowPrediction<T>& p, const FlowField<T>& gt, const ValidMask& valid,
                              LossWeights w = {}) {
  if (!p.flow_full) throw ShapeError("multiscale_loss: full-resolution prediction missing");
  NoGradGuard guard;
  return multiscale_loss(constant(p.flow16.flow), constant(p.flow8.flow), constant(p.flow_full->flow), gt, valid, w)
      .parts;
}

struct OptimizerConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  /// Length of the cosine schedule; 0 keeps the rate constant.
  long total_steps = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, lr, beta1, beta2, eps, weight_decay, clip_norm,
                                                total_steps)

/// Cosine decay from `lr` at step 0 to zero at `total_steps`.
inline double learning_rate(const OptimizerConfig& o, long step) {
  if (o.total_steps <= 0) return o.lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(o.total_steps));
  return o.lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

template <class T>
struct AdamMoments {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

template <class T>
struct TrainState {
  NeuFlow<T> model;
  AdamMoments<T> moments;
  OptimizerConfig optimizer;
  long step = 0;
  std::uint64_t seed = 0;
  double best_val_epe = std::numeric_limits<double>::infinity();

  TrainState(NeuFlow<T> m, OptimizerConfig o, std::uint64_t s)
      : model(std::move(m)), optimizer(o), seed(s) {
    for (const auto& [_, var] : model.parameters().entries()) {
      moments.m.emplace_back(var.value().shape());
      moments.v.emplace_back(var.value().shape());
    }
  }
};

/// Norm of the concatenated parameter gradients.
template <class T>
double gradient_norm(ParameterSet<T>& params) {
  double sq = 0.0;
  for (auto& [_, var] : params.entries()) {
    if (var.node()->grad.empty()) continue;
    for (T g : var.node()->grad.storage()) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

/// One AdamW update from the mean loss over `batch`. On a non-finite loss or
/// gradient the state is left untouched and NumericalError is thrown.
template <class T>
LossBreakdown train_step(TrainState<T>& state, const std::vector<const FlowSample<T>*>& batch,
                         LossWeights weights = {}) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  for (const auto* s : batch) {
    if (s->img1.shape() != batch.front()->img1.shape()) throw ShapeError("train_step: batch images differ in size");
  }
  auto& params = state.model.parameters();
  params.zero_grad();
  LossBreakdown mean;
  mean.weights = weights;
  const T inv = T(1) / static_cast<T>(batch.size());
  for (const auto* s : batch) {
    const FlowGraph<T> g = state.model.forward_graph(s->img1, s->img2, true);
    const LossTerms<T> terms = multiscale_loss(g, s->gt, s->valid, weights);
    if (!std::isfinite(terms.parts.total)) {
      params.zero_grad();
      throw NumericalError("non-finite loss at step " + std::to_string(state.step) + " on sample " + s->id);
    }
    backward(scale(terms.total, inv));
    mean.l16 += terms.parts.l16 / static_cast<double>(batch.size());
    mean.l8 += terms.parts.l8 / static_cast<double>(batch.size());
    mean.lfull += terms.parts.lfull / static_cast<double>(batch.size());
    mean.total += terms.parts.total / static_cast<double>(batch.size());
    mean.no_valid_pixels = mean.no_valid_pixels || terms.parts.no_valid_pixels;
  }

  const double norm = gradient_norm(params);
  if (!std::isfinite(norm)) {
    params.zero_grad();
    throw NumericalError("non-finite gradient at step " + std::to_string(state.step));
  }
  const auto& o = state.optimizer;
  const T clip = norm > o.clip_norm ? static_cast<T>(o.clip_norm / norm) : T(1);
  const double lr = learning_rate(o, state.step);
  const long t = state.step + 1;
  const T bc1 = static_cast<T>(1.0 - std::pow(o.beta1, static_cast<double>(t)));
  const T bc2 = static_cast<T>(1.0 - std::pow(o.beta2, static_cast<double>(t)));
  const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2), eps = static_cast<T>(o.eps);
  const T step_size = static_cast<T>(lr), decay = static_cast<T>(1.0 - lr * o.weight_decay);

  auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var<T>& var = entries[i].second;
    Tensor<T>& p = var.mutable_value();
    const Tensor<T> g = var.grad();
    Tensor<T>& m = state.moments.m[i];
    Tensor<T>& v = state.moments.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const T gk = g[k] * clip;
      m[k] = b1 * m[k] + (T(1) - b1) * gk;
      v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
      const T mhat = m[k] / bc1, vhat = v[k] / bc2;
      p[k] = p[k] * decay - step_size * mhat / (std::sqrt(vhat) + eps);
    }
  }
  params.zero_grad();
  ++state.step;
  return mean;
}

template <class T>
LossBreakdown train_step(TrainState<T>& state, const std::vector<FlowSample<T>>& batch, LossWeights weights = {}) {
  std::vector<const FlowSample<T>*> ptrs;
  for (const auto& s : batch) ptrs.push_back(&s);
  return train_step(state, ptrs, weights);
}

/// Sample indices for `step`: the data is visited in epochs, each a
/// permutation drawn from (seed, epoch), so the order depends only on those.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, long step, int batch_size, std::size_t n) {
  std::vector<std::size_t> out;
  std::size_t cached_epoch = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> perm(n);
  for (int j = 0; j < batch_size; ++j) {
    const std::size_t pos = static_cast<std::size_t>(step) * batch_size + j;
    const std::size_t epoch = pos / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * (epoch + 1)));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Train-state checkpoints: model blocks plus "adam.m/<name>" and "adam.v/<name>".

template <class T>
Checkpoint<T> train_checkpoint(const TrainState<T>& s) {
  nlohmann::json meta = {{"kind", "train_state"},
                         {"step", s.step},
                         {"seed", s.seed},
                         {"optimizer", s.optimizer},
                         {"best_val_epe", std::isfinite(s.best_val_epe) ? nlohmann::json(s.best_val_epe)
                                                                         : nlohmann::json(nullptr)}};
  Checkpoint<T> ck = model_checkpoint(s.model, std::move(meta));
  const auto& entries = s.model.parameters().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ck.blocks.emplace_back("adam.m/" + entries[i].first, s.moments.m[i]);
    ck.blocks.emplace_back("adam.v/" + entries[i].first, s.moments.v[i]);
  }
  return ck;
}

template <class T>
void save_train_state(const TrainState<T>& s, const std::filesystem::path& path) {
  write_checkpoint(train_checkpoint(s), path);
}

template <class T = float>
TrainState<T> load_train_state(const std::filesystem::path& path) {
  const Checkpoint<T> ck = read_checkpoint<T>(path);
  if (ck.meta.value("kind", "") != "train_state") throw FormatError(path.string() + ": not a training checkpoint");
  TrainState<T> s(model_from_checkpoint(ck), ck.meta.at("optimizer").template get<OptimizerConfig>(),
                  ck.meta.at("seed").template get<std::uint64_t>());
  s.step = ck.meta.at("step").template get<long>();
  const auto& best = ck.meta.at("best_val_epe");
  s.best_val_epe = best.is_null() ? std::numeric_limits<double>::infinity() : best.template get<double>();
  const auto& entries = s.model.parameters().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    for (auto [prefix, dst] : {std::pair{"adam.m/", &s.moments.m[i]}, std::pair{"adam.v/", &s.moments.v[i]}}) {
      const Tensor<T>* t = ck.find(prefix + entries[i].first);
      if (!t) throw FormatError(path.string() + ": missing optimizer block for " + entries[i].first);
      require_shape(t->shape(), dst->shape(), "optimizer block");
      *dst = *t;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Training loop

struct LogRecord {
  long step = 0;
  LossBreakdown loss;
  std::optional<double> val_epe;
};

inline nlohmann::json to_json(const LogRecord& r) {
  return {{"step", r.step},
          {"l16", r.loss.l16},
          {"l8", r.loss.l8},
          {"lfull", r.loss.lfull},
          {"total", r.loss.total},
          {"val_epe", r.val_epe ? nlohmann::json(*r.val_epe) : nlohmann::json(nullptr)}};
}

struct FitOptions {
  long steps = 2000;
  int batch_size = 4;
  OptimizerConfig optimizer;
  LossWeights weights;
  /// Validation interval in steps; the final step is always validated.
  long val_every = 200;
  /// Loss records are written every `log_every` steps.
  long log_every = 10;
  std::uint64_t seed = 0;
  /// Receives train_log.jsonl, last.ckpt and best.ckpt; empty disables file output.
  std::filesystem::path out_dir;
  /// Continue from a training checkpoint.
  std::optional<std::filesystem::path> resume;
  std::function<void(const LogRecord&)> on_log;
};

template <class T>
struct FitResult {
  TrainState<T> state;
  std::vector<LogRecord> log;
  std::optional<double> final_val_epe;
};

/// Trains on `train`, validating full-resolution EPE on `val`.
template <class T>
FitResult<T> fit(const NeuFlowConfig& cfg, const Dataset<T>& train, const Dataset<T>& val, FitOptions opts) {
  if (train.empty()) throw ConfigError("fit: training dataset is empty");
  if (opts.batch_size < 1) throw ConfigError("fit: batch size must be >= 1");
  if (opts.steps < 0) throw ConfigError("fit: steps must be >= 0");
  if (opts.optimizer.total_steps == 0) opts.optimizer.total_steps = opts.steps;

  FitResult<T> out{opts.resume ? load_train_state<T>(*opts.resume) : TrainState<T>(NeuFlow<T>(cfg), opts.optimizer, opts.seed),
                   {}, std::nullopt};
  TrainState<T>& state = out.state;
  if (opts.resume && !(state.model.config() == cfg)) {
    throw ConfigError("fit: resume checkpoint was trained with a different configuration");
  }
  if (state.step >= opts.steps) return out;

  const bool files = !opts.out_dir.empty();
  std::ofstream log_file;
  if (files) {
    std::filesystem::create_directories(opts.out_dir);
    log_file.open(opts.out_dir / "train_log.jsonl", opts.resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw IoError("cannot open training log in " + opts.out_dir.string());
  }
  const Dataset<T>& val_set = val.empty() ? train : val;

  while (state.step < opts.steps) {
    const auto idx = batch_indices(state.seed, state.step, opts.batch_size, train.size());
    std::vector<const FlowSample<T>*> batch;
    for (auto i : idx) batch.push_back(&train.samples[i]);
    const LossBreakdown loss = train_step(state, batch, opts.weights);

    LogRecord rec{state.step, loss, std::nullopt};
    const bool last = state.step == opts.steps;
    const bool validate = last || (opts.val_every > 0 && state.step % opts.val_every == 0);
    if (validate) {
      rec.val_epe = evaluate(state.model, val_set, Resolution::Full, "val").mean_epe;
      out.final_val_epe = rec.val_epe;
      if (*rec.val_epe < state.best_val_epe) {
        state.best_val_epe = *rec.val_epe;
        if (files) save_model(state.model, opts.out_dir / "best.ckpt", {{"step", state.step}, {"val_epe", *rec.val_epe}});
      }
      if (files) save_train_state(state, opts.out_dir / "last.ckpt");
    }
    if (validate || state.step % std::max(1L, opts.log_every) == 0) {
      out.log.push_back(rec);
      if (files) log_file << to_json(rec).dump() << '\n' << std::flush;
      if (opts.on_log) opts.on_log(rec);
    }
  }
  return out;
}

}  // namespace neuflow
