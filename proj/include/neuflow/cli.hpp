#pragma once

// Command-line front end: gen, train, eval, infer, bench, viz.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include "neuflow/training.hpp"
#include "neuflow/visualize.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace neuflow::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Raised for invalid flag values detected after parsing.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline const char* kDeviceVariable = "NEUFLOW_DEVICE";

/// Compute device from NEUFLOW_DEVICE; only the CPU backend exists.
inline std::string select_device() {
  const char* v = std::getenv(kDeviceVariable);
  const std::string dev = v && *v ? v : "cpu";
  if (dev != "cpu") throw IoError(std::string(kDeviceVariable) + "=" + dev + ": device not available (supported: cpu)");
  return dev;
}

inline NeuFlowConfig preset_config(const std::string& name) {
  if (name == "paper") return NeuFlowConfig::paper();
  if (name == "tiny") return NeuFlowConfig::tiny();
  throw UsageError("unknown preset: " + name + " (expected paper or tiny)");
}

/// Preset, then a JSON config file merged on top, then key=value overrides.
inline NeuFlowConfig resolve_config(const std::string& preset, const std::string& config_path,
                                    const std::vector<std::string>& overrides) {
  nlohmann::json doc = preset_config(preset);
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw IoError("cannot open config file: " + config_path);
    try {
      doc.merge_patch(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config file " + config_path + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  NeuFlowConfig cfg;
  try {
    cfg = doc.get<NeuFlowConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x != std::string::npos) {
      std::size_t a = 0, b = 0;
      const int w = std::stoi(s.substr(0, x), &a), h = std::stoi(s.substr(x + 1), &b);
      if (a == x && b == s.size() - x - 1 && w > 0 && h > 0) return {w, h};
    }
  } catch (const std::exception&) {
  }
  throw UsageError("size must look like WIDTHxHEIGHT, got " + s);
}

inline MotionKind parse_motion(const std::string& s) {
  if (s == "translation") return MotionKind::Translation;
  if (s == "affine") return MotionKind::Affine;
  if (s == "mixed") return MotionKind::Mixed;
  throw UsageError("unknown motion: " + s + " (expected translation, affine or mixed)");
}

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string preset;
  std::string out;
  std::string data;
  std::string val_data;
  std::string layout = "chairs";
  std::string split = "train";
  std::string pass = "clean";
  int limit = 0;
  std::string ckpt;
  std::string resume;
  std::string img1, img2, flow;
  std::string res = "full";
  std::string size = "512x384";
  std::string csv;
  std::string motion = "mixed";
  long steps = 2000;
  int batch = 4;
  double lr = 4e-4;
  long val_every = 200;
  long log_every = 10;
  int count = 16;
  int image_size = 128;
  std::uint64_t seed = 7;
  int runs = 10;
  int warmup = 3;
  double max_radius = 0.0;
};

inline DatasetSpec dataset_spec(const Options& o, const std::string& root, Split split) {
  DatasetSpec spec;
  spec.root = root;
  spec.layout = parse_layout(o.layout);
  spec.split = split;
  spec.pass = o.pass;
  if (o.limit > 0) spec.limit = o.limit;
  spec.seed = o.seed;
  spec.count = o.count;
  spec.size = o.image_size;
  spec.validate();
  return spec;
}

template <class T>
Dataset<T> load_reported(const DatasetSpec& spec, std::ostream& err) {
  Dataset<T> d = load_dataset<T>(spec);
  for (const auto& w : d.warnings) err << nlohmann::json{{"event", "warning"}, {"message", w}}.dump() << '\n';
  for (const auto& e : d.errors) err << nlohmann::json{{"event", "skipped_sample"}, {"message", e}}.dump() << '\n';
  return d;
}

inline int cmd_gen(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.out.empty()) throw UsageError("gen: --out is required");
  const auto samples = generate_synthetic<float>(o.seed, o.count, o.image_size, parse_motion(o.motion));
  write_chairs(samples, o.out);
  err << nlohmann::json{{"event", "gen"}, {"count", samples.size()}, {"out", o.out}}.dump() << '\n';
  out << "wrote " << samples.size() << " pairs to " << o.out << '\n';
  return kExitOk;
}

inline int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.data.empty() && o.layout != "synthetic") throw UsageError("train: --data is required");
  const NeuFlowConfig cfg = resolve_config(o.preset.empty() ? "tiny" : o.preset, o.config_path, o.overrides);
  const Dataset<float> train = load_reported<float>(dataset_spec(o, o.data, Split::Train), err);
  if (train.empty()) throw IoError("train: no training samples found");
  Dataset<float> val;
  if (!o.val_data.empty()) val = load_reported<float>(dataset_spec(o, o.val_data, Split::Val), err);

  FitOptions f;
  f.steps = o.steps;
  f.batch_size = o.batch;
  f.optimizer.lr = o.lr;
  f.val_every = o.val_every;
  f.log_every = o.log_every;
  f.seed = o.seed;
  f.out_dir = o.out.empty() ? std::filesystem::path("runs/train") : std::filesystem::path(o.out);
  if (!o.resume.empty()) f.resume = o.resume;
  f.on_log = [&err](const LogRecord& r) { err << to_json(r).dump() << '\n'; };
  const FitResult<float> result = fit(cfg, train, val, f);
  nlohmann::json summary = {{"event", "train_done"},
                            {"steps", result.state.step},
                            {"params", result.state.model.parameter_count()},
                            {"out", f.out_dir.string()}};
  summary["final_val_epe"] = result.final_val_epe ? nlohmann::json(*result.final_val_epe) : nlohmann::json(nullptr);
  out << summary.dump() << '\n';
  return kExitOk;
}

inline int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.ckpt.empty()) throw UsageError("eval: --ckpt is required");
  if (o.data.empty() && o.layout != "synthetic") throw UsageError("eval: --data is required");
  const Resolution res = parse_resolution(o.res);
  const NeuFlow<float> model = load_model<float>(o.ckpt);
  const Dataset<float> data = load_reported<float>(dataset_spec(o, o.data, parse_split(o.split)), err);
  if (data.empty()) throw IoError("eval: dataset is empty");
  const EpeReport r = evaluate(model, data, res, o.layout + ":" + (o.data.empty() ? "generated" : o.data));
  out << to_json(r).dump() << '\n';
  write_table(out, r);
  if (!o.csv.empty()) {
    std::ofstream csv(o.csv);
    if (!csv) throw IoError("cannot write " + o.csv);
    write_per_sample_csv(csv, r);
  }
  return kExitOk;
}

inline int cmd_infer(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.ckpt.empty() || o.img1.empty() || o.img2.empty() || o.out.empty()) {
    throw UsageError("infer: --ckpt, --img1, --img2 and --out are required");
  }
  const Resolution res = parse_resolution(o.res);
  const NeuFlow<float> model = load_model<float>(o.ckpt);
  const Tensor<float> a = read_image<float>(o.img1), b = read_image<float>(o.img2);
  if (a.shape() != b.shape()) throw ShapeError("infer: images differ in size");
  const FlowPrediction<float> p = model.forward(a, b, res == Resolution::Full);
  const FlowField<float>& flow = res == Resolution::Full ? *p.flow_full : p.flow8;
  const std::filesystem::path flo_path(o.out);
  write_flo(flow, flo_path);
  std::filesystem::path png_path = flo_path;
  png_path.replace_extension(".png");
  write_image(flow_to_color(flow), png_path);
  err << nlohmann::json{{"event", "infer"}, {"flo", flo_path.string()}, {"png", png_path.string()}}.dump() << '\n';
  out << "wrote " << flo_path.string() << " and " << png_path.string() << '\n';
  return kExitOk;
}

inline int cmd_bench(const Options& o, std::ostream& out, std::ostream& err) {
  const auto [w, h] = parse_size(o.size);
  if (o.runs < 10) throw UsageError("bench: --runs must be >= 10");
  if (o.warmup < 3) throw UsageError("bench: --warmup must be >= 3");
  std::optional<NeuFlow<float>> model;
  if (!o.ckpt.empty()) {
    model.emplace(load_model<float>(o.ckpt));
  } else {
    model.emplace(resolve_config(o.preset.empty() ? "paper" : o.preset, o.config_path, o.overrides));
  }
  std::vector<bool> paths;
  if (o.res == "both") {
    paths = {false, true};
  } else {
    paths = {parse_resolution(o.res) == Resolution::Full};
  }
  std::vector<ScatterPoint> points;
  for (bool full : paths) {
    const BenchReport r = benchmark(*model, h, w, full, o.runs, o.warmup, o.seed);
    out << to_json(r).dump() << '\n';
    write_table(out, r);
    points.push_back({full ? "full" : "eighth", r.params, 0.0, r.mean});
  }
  if (!o.csv.empty()) {
    std::ofstream csv(o.csv);
    if (!csv) throw IoError("cannot write " + o.csv);
    write_scatter_csv(csv, points);
  }
  err << nlohmann::json{{"event", "bench_done"}}.dump() << '\n';
  return kExitOk;
}

inline int cmd_viz(const Options& o, std::ostream& out, std::ostream&) {
  if (o.flow.empty() || o.out.empty()) throw UsageError("viz: --flow and --out are required");
  const FlowField<float> flow = read_flo<float>(o.flow);
  std::optional<double> radius;
  if (o.max_radius > 0.0) radius = o.max_radius;
  write_image(flow_to_color(flow, radius), o.out);
  out << "wrote " << o.out << '\n';
  return kExitOk;
}

/// Parses argv and runs one subcommand.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"NeuFlow optical flow: training, evaluation, inference and benchmarking", "neuflow"};
  app.require_subcommand(1, 1);
  Options o;

  auto common = [&o](CLI::App* c) {
    c->add_option("--config", o.config_path, "JSON configuration file");
    c->add_option("--set", o.overrides, "Configuration override key=value (repeatable)");
  };
  auto dataset_flags = [&o](CLI::App* c) {
    c->add_option("--layout", o.layout, "Dataset layout: chairs, sintel or synthetic");
    c->add_option("--pass", o.pass, "Sintel pass: clean or final");
    c->add_option("--limit", o.limit, "Use at most this many samples");
  };

  auto* gen = app.add_subcommand("gen", "Write synthetic pairs in the chairs layout");
  gen->add_option("--count", o.count, "Number of pairs");
  gen->add_option("--size", o.image_size, "Image side length (multiple of 16)");
  gen->add_option("--seed", o.seed, "Random seed");
  gen->add_option("--motion", o.motion, "translation, affine or mixed");
  gen->add_option("--out", o.out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model");
  common(train);
  dataset_flags(train);
  train->add_option("--data", o.data, "Training data root");
  train->add_option("--val", o.val_data, "Validation data root (default: the training set)");
  train->add_option("--preset", o.preset, "Base configuration: tiny (default) or paper");
  train->add_option("--steps", o.steps, "Optimizer steps");
  train->add_option("--batch", o.batch, "Batch size");
  train->add_option("--lr", o.lr, "Peak learning rate");
  train->add_option("--val-every", o.val_every, "Validation interval in steps");
  train->add_option("--log-every", o.log_every, "Loss logging interval in steps");
  train->add_option("--seed", o.seed, "Batch-order seed");
  train->add_option("--resume", o.resume, "Training checkpoint to continue from");
  train->add_option("--out", o.out, "Output directory (default runs/train)");

  auto* eval = app.add_subcommand("eval", "Evaluate end-point error");
  dataset_flags(eval);
  eval->add_option("--ckpt", o.ckpt, "Model checkpoint")->required();
  eval->add_option("--data", o.data, "Dataset root");
  eval->add_option("--split", o.split, "train or val");
  eval->add_option("--res", o.res, "full or eighth");
  eval->add_option("--csv", o.csv, "Per-sample CSV report");

  auto* infer = app.add_subcommand("infer", "Estimate flow for one image pair");
  infer->add_option("--ckpt", o.ckpt, "Model checkpoint")->required();
  infer->add_option("--img1", o.img1, "First image")->required();
  infer->add_option("--img2", o.img2, "Second image")->required();
  infer->add_option("--out", o.out, "Output .flo path (a color .png is written next to it)")->required();
  infer->add_option("--res", o.res, "full or eighth");

  auto* bench = app.add_subcommand("bench", "Measure forward latency");
  common(bench);
  bench->add_option("--ckpt", o.ckpt, "Model checkpoint (default: random weights)");
  bench->add_option("--preset", o.preset, "Configuration without a checkpoint: paper (default) or tiny");
  bench->add_option("--size", o.size, "WIDTHxHEIGHT");
  bench->add_option("--res", o.res, "eighth, full or both");
  bench->add_option("--runs", o.runs, "Timed runs (>= 10)");
  bench->add_option("--warmup", o.warmup, "Warmup runs (>= 3)");
  bench->add_option("--seed", o.seed, "Input seed");
  bench->add_option("--csv", o.csv, "Latency CSV for plotting");

  auto* viz = app.add_subcommand("viz", "Render a .flo file as a color image");
  viz->add_option("--flow", o.flow, "Input .flo")->required();
  viz->add_option("--out", o.out, "Output image")->required();
  viz->add_option("--max-radius", o.max_radius, "Magnitude at full saturation (default: maximum)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    const std::string device = select_device();
    nlohmann::json inv = {{"event", "invocation"}, {"command", name}, {"device", device}};
    std::vector<std::string> args(argv, argv + argc);
    inv["argv"] = args;
    err << inv.dump() << '\n';
    if (name == "gen") return cmd_gen(o, out, err);
    if (name == "train") return cmd_train(o, out, err);
    if (name == "eval") return cmd_eval(o, out, err);
    if (name == "infer") return cmd_infer(o, out, err);
    if (name == "bench") return cmd_bench(o, out, err);
    return cmd_viz(o, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << nlohmann::json{{"event", "error"}, {"command", name}, {"message", e.what()}}.dump() << '\n';
    return kExitRuntime;
  }
}

}  // namespace neuflow::cli
