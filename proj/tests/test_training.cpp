#include "gradcheck.hpp"

#include <neuflow/neuflow.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace neuflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("neuflow_training_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

FlowField<double> constant_flow(int h, int w, double u, double v, Scale s = Scale::Full) {
  FlowField<double> f(h, w, s);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      f.u(y, x) = u;
      f.v(y, x) = v;
    }
  return f;
}

struct LossFixture {
  FlowField<double> gt = constant_flow(32, 48, 2.0, -1.0);
  ValidMask valid{32, 48, true};

  LossTerms<double> with_offset(double du, LossWeights w = {}) const {
    auto at = [&](int f) { return constant(constant_flow(32 / f, 48 / f, (2.0 + du) / f, -1.0 / f).flow); };
    return multiscale_loss(at(16), at(8), at(1), gt, valid, w);
  }
};

TEST(Loss, ZeroWhenPredictionsMatch) {
  const auto t = LossFixture{}.with_offset(0.0);
  EXPECT_NEAR(t.parts.total, 0.0, 1e-12);
  EXPECT_FALSE(t.parts.no_valid_pixels);
}

TEST(Loss, UnitErrorAtEveryScale) {
  const auto t = LossFixture{}.with_offset(1.0);
  EXPECT_NEAR(t.parts.l16, 1.0, 1e-12);
  EXPECT_NEAR(t.parts.l8, 1.0, 1e-12);
  EXPECT_NEAR(t.parts.lfull, 1.0, 1e-12);
  EXPECT_NEAR(t.parts.total, 1.7, 1e-12);
}

TEST(Loss, WeightsScaleTerms) {
  const auto t = LossFixture{}.with_offset(1.0, LossWeights{0.2, 0.5, 0.5});
  EXPECT_NEAR(t.parts.total, 1.2, 1e-12);
}

TEST(Loss, NoValidPixelsIsZeroWithFlag) {
  LossFixture f;
  f.valid = ValidMask(32, 48, false);
  const auto t = f.with_offset(3.0);
  EXPECT_EQ(t.parts.total, 0.0);
  EXPECT_TRUE(t.parts.no_valid_pixels);
}

TEST(Schedule, CosineDecay) {
  OptimizerConfig o;
  o.total_steps = 100;
  EXPECT_DOUBLE_EQ(learning_rate(o, 0), 4e-4);
  EXPECT_NEAR(learning_rate(o, 50), 2e-4, 1e-12);
  EXPECT_NEAR(learning_rate(o, 100), 0.0, 1e-18);
  o.total_steps = 0;
  EXPECT_DOUBLE_EQ(learning_rate(o, 1000), 4e-4);
}

TEST(Batches, DeterministicEpochPermutations) {
  EXPECT_EQ(batch_indices(3, 5, 4, 10), batch_indices(3, 5, 4, 10));
  std::multiset<std::size_t> epoch;
  for (long s = 0; s < 5; ++s)
    for (auto i : batch_indices(3, s, 2, 10)) epoch.insert(i);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(epoch.count(i), 1u);
}

std::vector<FlowSample<float>> small_batch() { return generate_synthetic<float>(3, 4, 64, MotionKind::Mixed); }

TEST(TrainStep, LossDecreasesOnFixedBatch) {
  const auto batch = small_batch();
  TrainState<float> state(NeuFlow<float>(NeuFlowConfig::tiny()), OptimizerConfig{}, 1);
  const double first = train_step(state, batch).total;
  double last = first;
  for (int i = 1; i < 200; ++i) last = train_step(state, batch).total;
  EXPECT_EQ(state.step, 200);
  EXPECT_LT(last, first);
}

TEST(TrainStep, Deterministic) {
  const auto batch = small_batch();
  TrainState<float> a(NeuFlow<float>(NeuFlowConfig::tiny()), OptimizerConfig{}, 1);
  TrainState<float> b(NeuFlow<float>(NeuFlowConfig::tiny()), OptimizerConfig{}, 1);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(train_step(a, batch).total, train_step(b, batch).total);
  const auto& ea = a.model.parameters().entries();
  const auto& eb = b.model.parameters().entries();
  for (std::size_t i = 0; i < ea.size(); ++i) EXPECT_TRUE(ea[i].second.value() == eb[i].second.value());
}

TEST(TrainStep, ZeroLearningRateKeepsWeights) {
  const auto batch = small_batch();
  OptimizerConfig o;
  o.lr = 0.0;
  TrainState<float> state(NeuFlow<float>(NeuFlowConfig::tiny()), o, 1);
  const auto before = model_checkpoint(state.model);
  const double l0 = train_step(state, batch).total;
  const double l1 = train_step(state, batch).total;
  EXPECT_EQ(l0, l1);
  const auto after = model_checkpoint(state.model);
  for (std::size_t i = 0; i < before.blocks.size(); ++i) EXPECT_TRUE(before.blocks[i].second == after.blocks[i].second);
}

TEST(TrainStep, NonFiniteLossLeavesStateUnchanged) {
  auto batch = small_batch();
  batch[1].img1(0, 5, 5) = std::numeric_limits<float>::quiet_NaN();
  TrainState<float> state(NeuFlow<float>(NeuFlowConfig::tiny()), OptimizerConfig{}, 1);
  const auto before = model_checkpoint(state.model);
  EXPECT_THROW(train_step(state, batch), NumericalError);
  EXPECT_EQ(state.step, 0);
  const auto after = model_checkpoint(state.model);
  for (std::size_t i = 0; i < before.blocks.size(); ++i) EXPECT_TRUE(before.blocks[i].second == after.blocks[i].second);
  for (const auto& m : state.moments.m)
    for (float v : m.storage()) EXPECT_EQ(v, 0.0f);
}

Dataset<float> tiny_dataset() {
  Dataset<float> d;
  d.samples = generate_synthetic<float>(5, 4, 64, MotionKind::Mixed);
  return d;
}

TEST(Fit, ZeroStepsWritesNothing) {
  const auto dir = scratch_dir("zero");
  FitOptions o;
  o.steps = 0;
  o.out_dir = dir / "run";
  const auto r = fit(NeuFlowConfig::tiny(), tiny_dataset(), Dataset<float>{}, o);
  EXPECT_EQ(r.state.step, 0);
  EXPECT_TRUE(r.log.empty());
  EXPECT_FALSE(fs::exists(dir / "run"));
}

TEST(Fit, EmptyDatasetIsAnError) {
  EXPECT_THROW(fit(NeuFlowConfig::tiny(), Dataset<float>{}, Dataset<float>{}, FitOptions{}), ConfigError);
}

TEST(Fit, WritesLogAndCheckpoints) {
  const auto dir = scratch_dir("log");
  FitOptions o;
  o.steps = 4;
  o.val_every = 2;
  o.log_every = 1;
  o.out_dir = dir;
  const auto r = fit(NeuFlowConfig::tiny(), tiny_dataset(), Dataset<float>{}, o);
  ASSERT_TRUE(r.final_val_epe.has_value());
  EXPECT_TRUE(fs::exists(dir / "best.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "last.ckpt"));
  std::ifstream in(dir / "train_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.size(), 6u);
    for (const char* key : {"step", "l16", "l8", "lfull", "total", "val_epe"}) EXPECT_TRUE(j.contains(key)) << key;
    ++lines;
    EXPECT_EQ(j["step"], lines);
    EXPECT_EQ(j["val_epe"].is_null(), lines % 2 == 1);
  }
  EXPECT_EQ(lines, 4);
}

TEST(Fit, ResumeContinuesIdentically) {
  const auto dir = scratch_dir("resume");
  FitOptions base;
  base.batch_size = 2;
  base.val_every = 3;
  base.log_every = 1;
  base.optimizer.total_steps = 6;
  base.seed = 11;

  FitOptions straight = base;
  straight.steps = 6;
  straight.out_dir = dir / "straight";
  const auto full = fit(NeuFlowConfig::tiny(), tiny_dataset(), Dataset<float>{}, straight);

  FitOptions first = base;
  first.steps = 3;
  first.out_dir = dir / "split";
  fit(NeuFlowConfig::tiny(), tiny_dataset(), Dataset<float>{}, first);
  FitOptions second = base;
  second.steps = 6;
  second.out_dir = dir / "split";
  second.resume = dir / "split" / "last.ckpt";
  const auto resumed = fit(NeuFlowConfig::tiny(), tiny_dataset(), Dataset<float>{}, second);

  EXPECT_EQ(resumed.state.step, 6);
  const auto& a = full.state.model.parameters().entries();
  const auto& b = resumed.state.model.parameters().entries();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].second.value() == b[i].second.value()) << a[i].first;
  ASSERT_EQ(resumed.log.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(resumed.log[i].loss.total, full.log[i + 3].loss.total);
}

TEST(Fit, ResumeRejectsDifferentConfig) {
  const auto dir = scratch_dir("mismatch");
  FitOptions o;
  o.steps = 1;
  o.out_dir = dir;
  fit(NeuFlowConfig::tiny(), tiny_dataset(), Dataset<float>{}, o);
  NeuFlowConfig other = NeuFlowConfig::tiny();
  other.refinement_width = 16;
  o.steps = 2;
  o.resume = dir / "last.ckpt";
  EXPECT_THROW(fit(other, tiny_dataset(), Dataset<float>{}, o), ConfigError);
}

// Checkpoints

FlowPrediction<float> run(const NeuFlow<float>& model) {
  const auto s = make_synthetic_pair<float>(2, 64, 64, AffineMotion::translation(3.0, 1.0), "ck");
  return model.forward(s.img1, s.img2, true);
}

NeuFlow<float> trained_tiny() {
  TrainState<float> state(NeuFlow<float>(NeuFlowConfig::tiny()), OptimizerConfig{}, 1);
  train_step(state, small_batch());
  return std::move(state.model);
}

TEST(Checkpoint, RoundTripReproducesForward) {
  const auto dir = scratch_dir("ckpt");
  const auto model = trained_tiny();
  save_model(model, dir / "m.ckpt", {{"note", "x"}});
  const auto loaded = load_model(dir / "m.ckpt");
  EXPECT_TRUE(loaded.config() == model.config());
  const auto a = run(model), b = run(loaded);
  EXPECT_TRUE(a.flow_full->flow == b.flow_full->flow);
  EXPECT_TRUE(a.flow8.flow == b.flow8.flow);
  EXPECT_EQ(read_checkpoint(dir / "m.ckpt").meta["note"], "x");
}

TEST(Checkpoint, DoubleModelLoadsFromFloatFile) {
  const auto dir = scratch_dir("width");
  const auto model = trained_tiny();
  save_model(model, dir / "m.ckpt");
  const auto wide = load_model<double>(dir / "m.ckpt");
  const auto& a = model.parameters().entries();
  const auto& b = wide.parameters().entries();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].second.value().size(); ++k)
      EXPECT_EQ(static_cast<double>(a[i].second.value()[k]), b[i].second.value()[k]);
}

TEST(Checkpoint, FlippedByteIsCorruption) {
  std::string bytes = encode_checkpoint(model_checkpoint(NeuFlow<float>(NeuFlowConfig::tiny())));
  bytes[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(decode_checkpoint<float>(bytes), CorruptionError);
}

TEST(Checkpoint, TruncatedIsCorruption) {
  const std::string bytes = encode_checkpoint(model_checkpoint(NeuFlow<float>(NeuFlowConfig::tiny())));
  EXPECT_THROW(decode_checkpoint<float>(bytes.substr(0, bytes.size() - 100)), CorruptionError);
  EXPECT_THROW(decode_checkpoint<float>(bytes.substr(0, 12)), CorruptionError);
}

TEST(Checkpoint, BadMagicOrVersionIsFormatError) {
  std::string bytes = encode_checkpoint(model_checkpoint(NeuFlow<float>(NeuFlowConfig::tiny())));
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint<float>(magic), FormatError);
  std::string version = bytes;
  version[8] = 9;
  EXPECT_THROW(decode_checkpoint<float>(version), FormatError);
  EXPECT_THROW(decode_checkpoint<float>(""), FormatError);
}

TEST(Checkpoint, MissingBlockIsFormatError) {
  auto ck = model_checkpoint(NeuFlow<float>(NeuFlowConfig::tiny()));
  ck.blocks.pop_back();
  EXPECT_THROW(model_from_checkpoint(decode_checkpoint<float>(encode_checkpoint(ck))), FormatError);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(load_model("/nonexistent/dir/m.ckpt"), IoError);
}

TEST(Checkpoint, TrainStateRoundTrip) {
  const auto dir = scratch_dir("state");
  TrainState<float> state(NeuFlow<float>(NeuFlowConfig::tiny()), OptimizerConfig{}, 9);
  train_step(state, small_batch());
  state.best_val_epe = 1.25;
  save_train_state(state, dir / "s.ckpt");
  const auto back = load_train_state<float>(dir / "s.ckpt");
  EXPECT_EQ(back.step, 1);
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.best_val_epe, 1.25);
  EXPECT_EQ(back.optimizer.lr, state.optimizer.lr);
  for (std::size_t i = 0; i < state.moments.m.size(); ++i) {
    EXPECT_TRUE(back.moments.m[i] == state.moments.m[i]);
    EXPECT_TRUE(back.moments.v[i] == state.moments.v[i]);
  }
  EXPECT_THROW(load_train_state<float>((save_model(state.model, dir / "m.ckpt"), dir / "m.ckpt")), FormatError);
}

TEST(Gradients, TinyModelMatchesFiniteDifferences) {
  NeuFlow<double> model(NeuFlowConfig::tiny());
  gradcheck::randomize_parameters(model, 3);
  const auto sample = generate_synthetic<double>(13, 2, 32, MotionKind::Translation, {4.0, 0.05, 0})[1];
  const auto r = gradcheck::check_model(model, sample, 4, 1e-4, 3);
  EXPECT_LT(r.worst(), 1e-3);
  EXPECT_GT(r.checked(), 100);
}

}  // namespace
