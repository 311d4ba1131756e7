#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "rescan/train.hpp"

using namespace rescan;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rescan_train_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

const Dataset& toy_dataset() {
  static const Dataset ds = [] {
    DatasetSpec spec;
    spec.size = 32;
    spec.test_pairs = 2;
    return synthesize_dataset(6, spec, 5);
  }();
  return ds;
}

TrainConfig quick_config(int iterations) {
  TrainConfig c;
  c.patch_size = 16;
  c.patches_per_image = 10;
  c.batch_size = 4;
  c.iterations = iterations;
  c.lr_drops = {};
  c.seed = 3;
  return c;
}

RescanConfig small_model(UnitKind unit = UnitKind::kNone, Framework fw = Framework::kAdditive, int stages = 1) {
  RescanConfig c;
  c.scan.depth = 5;
  c.scan.width = 8;
  c.unit = unit;
  c.framework = fw;
  c.stages = stages;
  return c;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  return a.numel() == b.numel() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace

TEST(Schedule, FullScaleDrops) {
  const TrainConfig c = TrainConfig::full_scale();
  EXPECT_DOUBLE_EQ(lr_at(0, c), 5e-3);
  EXPECT_DOUBLE_EQ(lr_at(14999, c), 5e-3);
  EXPECT_DOUBLE_EQ(lr_at(15000, c), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(17499, c), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(17500, c), 5e-5);
  EXPECT_EQ(c.batch_size, 64);
}

TEST(Schedule, DeskDefaultsKeepProportions) {
  const TrainConfig c;
  EXPECT_EQ(c.iterations, 2000);
  EXPECT_EQ(c.lr_drops, (std::vector<int>{1200, 1700}));
  EXPECT_DOUBLE_EQ(lr_at(1199, c), 5e-3);
  EXPECT_DOUBLE_EQ(lr_at(1200, c), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(1700, c), 5e-5);
}

TEST(Schedule, ValidationRejectsBadDrops) {
  TrainConfig c;
  c.lr_drops = {1700, 1200};
  EXPECT_THROW(validate(c), ConfigError);
  c.lr_drops = {2500};
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Patches, ExactSizeImageGivesOriginCrops) {
  DatasetSpec spec;
  spec.size = 64;
  spec.test_pairs = 0;
  const Dataset ds = synthesize_dataset(1, spec, 2);
  TrainConfig c;
  const PatchPool pool = sample_patches(ds.train, c, 9);
  ASSERT_EQ(pool.patches.size(), 100u);
  for (const auto& p : pool.patches) {
    EXPECT_EQ(p.y, 0);
    EXPECT_EQ(p.x, 0);
  }
}

TEST(Patches, PoolSizeAndDeterminism) {
  DatasetSpec spec;
  spec.size = 80;
  spec.test_pairs = 0;
  const Dataset ds = synthesize_dataset(2, spec, 2);
  TrainConfig c;
  const PatchPool a = sample_patches(ds.train, c, 9);
  const PatchPool b = sample_patches(ds.train, c, 9);
  ASSERT_EQ(a.patches.size(), 200u);
  for (std::size_t i = 0; i < a.patches.size(); ++i) {
    EXPECT_EQ(a.patches[i].y, b.patches[i].y);
    EXPECT_EQ(a.patches[i].x, b.patches[i].x);
    EXPECT_LE(a.patches[i].y, 16);
    EXPECT_LE(a.patches[i].x, 16);
  }
}

TEST(Patches, CropsStayAligned) {
  const auto& samples = toy_dataset().train;
  const TrainConfig c = quick_config(1);
  const PatchPool pool = sample_patches(samples, c, 4);
  for (const auto& ref : pool.patches) {
    const PatchPair p = materialize(ref, samples, c.patch_size);
    for (std::size_t i = 0; i < p.rainy.values.size(); ++i) {
      ASSERT_NEAR(p.rainy.values[i] - p.residual.values[i], p.clean.values[i], 1e-6);
    }
  }
}

TEST(Patches, UndersizedImagesAreSkipped) {
  const auto& samples = toy_dataset().train;
  TrainConfig c = quick_config(1);
  c.patch_size = 48;
  const PatchPool pool = sample_patches(samples, c, 1);
  EXPECT_TRUE(pool.patches.empty());
  EXPECT_EQ(pool.warnings.size(), samples.size());
  RescanModel<float> model(small_model(), 1);
  EXPECT_THROW(train(model, samples, {}, c), ConfigError);
}

TEST(Train, ZeroIterationsReturnsInitialisation) {
  RescanModel<float> model(small_model(), 11);
  const Checkpoint before = make_checkpoint(model);
  const auto result = train(model, toy_dataset().train, {}, quick_config(0));
  ASSERT_EQ(result.checkpoint.tensors.size(), before.tensors.size());
  for (std::size_t i = 0; i < before.tensors.size(); ++i) {
    EXPECT_EQ(result.checkpoint.tensors[i].values, before.tensors[i].values);
  }
  EXPECT_TRUE(result.log.loss.empty());
}

TEST(Train, LossDecreasesOnFixedBatch) {
  // One image, one patch position: every batch is the same fixed batch.
  const auto& all = toy_dataset().train;
  const std::vector<Sample> one{all.front()};
  TrainConfig c = quick_config(51);
  c.patch_size = 32;
  c.patches_per_image = 4;
  RescanModel<float> model(small_model(), 12);
  const auto result = train(model, one, {}, c);
  ASSERT_EQ(result.log.loss.size(), 51u);
  EXPECT_LT(result.log.loss[50], result.log.loss[0]);
}

TEST(Train, LogMatchesScheduleAndIsDeterministic) {
  TrainConfig c = quick_config(12);
  c.lr_drops = {5, 9};
  c.eval_every = 6;
  const auto& ds = toy_dataset();
  RescanModel<float> a(small_model(UnitKind::kGru, Framework::kFull, 2), 13);
  RescanModel<float> b(small_model(UnitKind::kGru, Framework::kFull, 2), 13);
  const auto ra = train(a, ds.train, ds.test, c);
  const auto rb = train(b, ds.train, ds.test, c);
  EXPECT_TRUE(ra.log == rb.log);
  ASSERT_EQ(ra.log.lr.size(), 12u);
  for (std::size_t i = 0; i < ra.log.lr.size(); ++i) EXPECT_EQ(ra.log.lr[i], lr_at(ra.log.iteration[i], c));
  ASSERT_EQ(ra.log.evals.size(), 2u);
  EXPECT_EQ(ra.log.evals[0].iteration, 6);
  EXPECT_EQ(ra.log.evals[1].iteration, 12);
  ASSERT_EQ(ra.checkpoint.tensors.size(), rb.checkpoint.tensors.size());
  for (std::size_t i = 0; i < ra.checkpoint.tensors.size(); ++i) {
    EXPECT_EQ(ra.checkpoint.tensors[i].values, rb.checkpoint.tensors[i].values);
  }
  std::ostringstream csv_a, csv_b;
  write_csv(csv_a, ra.log);
  write_csv(csv_b, rb.log);
  EXPECT_EQ(csv_a.str(), csv_b.str());
}

TEST(Train, NonFiniteLossDumpsLastGood) {
  const fs::path dir = scratch_dir("nan");
  TrainConfig c = quick_config(3);
  c.checkpoint_dir = dir;
  RescanModel<float> model(small_model(), 14);
  std::vector<Sample> poisoned = toy_dataset().train;
  for (auto& s : poisoned) std::fill(s.rainy.values.begin(), s.rainy.values.end(), std::numeric_limits<float>::quiet_NaN());
  EXPECT_THROW(train(model, poisoned, {}, c), NumericError);
  EXPECT_TRUE(fs::exists(dir / "last_good.ckpt"));
  EXPECT_TRUE(fs::exists(config_path_for(dir / "last_good.ckpt")));
  fs::remove_all(dir);
}

TEST(Train, PeriodicCheckpoints) {
  const fs::path dir = scratch_dir("periodic");
  TrainConfig c = quick_config(4);
  c.checkpoint_every = 2;
  c.checkpoint_dir = dir;
  RescanModel<float> model(small_model(), 15);
  train(model, toy_dataset().train, {}, c);
  EXPECT_TRUE(fs::exists(dir / "iter_000002.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "iter_000004.ckpt"));
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripPreservesForwardBitwise) {
  const fs::path dir = scratch_dir("ckpt");
  fs::create_directories(dir);
  for (auto unit : {UnitKind::kNone, UnitKind::kRnn, UnitKind::kGru, UnitKind::kLstm}) {
    const auto fw = unit == UnitKind::kNone ? Framework::kIter : Framework::kFull;
    RescanModel<float> model(small_model(unit, fw, 2), 16);
    const fs::path path = dir / ("m_" + unit_name(unit) + ".ckpt");
    save_model(model, path);
    const RescanModel<float> loaded = load_model<float>(path);
    const Tensor<float> input = to_tensor<float>(toy_dataset().test.front().rainy);
    NoGradGuard no_grad;
    EXPECT_TRUE(same_bits(rescan_forward(model, input).background, rescan_forward(loaded, input).background));
    // Saving the loaded model reproduces the file byte for byte.
    save_model(loaded, dir / "again.ckpt");
    EXPECT_EQ(slurp(path), slurp(dir / "again.ckpt"));
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, HeaderLayout) {
  const fs::path dir = scratch_dir("layout");
  fs::create_directories(dir);
  RescanModel<float> model(small_model(), 17);
  save_model(model, dir / "m.ckpt");
  const std::string bytes = slurp(dir / "m.ckpt");
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 8), "RSCNCKPT");
  std::uint32_t version = 0, count = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  std::memcpy(&count, bytes.data() + 12, 4);
  EXPECT_EQ(version, 1u);
  EXPECT_EQ(count, model.parameters().size());
  std::uint16_t name_len = 0;
  std::memcpy(&name_len, bytes.data() + 16, 2);
  EXPECT_EQ(bytes.substr(18, name_len), model.parameters().front().first);
  fs::remove_all(dir);
}

TEST(Checkpoint, IterModelsRecordNoState) {
  const KeyValues kv = to_key_values(small_model(UnitKind::kNone, Framework::kIter, 3));
  EXPECT_EQ(kv.at("state_layers"), "none");
  const KeyValues gru = to_key_values(small_model(UnitKind::kGru, Framework::kFull, 3));
  EXPECT_EQ(gru.at("state_layers"), "0,1,2,3");
}

TEST(Checkpoint, CorruptFilesAreIoErrors) {
  const fs::path dir = scratch_dir("corrupt");
  fs::create_directories(dir);
  { std::ofstream(dir / "bad.ckpt") << "not a checkpoint"; }
  EXPECT_THROW(read_checkpoint(dir / "bad.ckpt"), IoError);
  EXPECT_THROW(read_checkpoint(dir / "missing.ckpt"), IoError);
  RescanModel<float> model(small_model(), 18);
  save_model(model, dir / "m.ckpt");
  const std::string bytes = slurp(dir / "m.ckpt");
  { std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2); }
  EXPECT_THROW(read_checkpoint(dir / "short.ckpt"), IoError);
  RescanConfig wide = small_model();
  wide.scan.width = 12;
  RescanModel<float> wider(wide, 1);
  EXPECT_THROW(load_into(wider, read_checkpoint(dir / "m.ckpt")), ConfigError);
  fs::remove_all(dir);
}

TEST(Evaluate, UntrainedZeroModelMatchesBaseline) {
  RescanModel<float> model(small_model(), 19);
  for (auto& [name, p] : model.parameters()) {
    Tensor<float> t = p;
    for (auto& v : t.data()) v = 0.0f;
  }
  const auto& test = toy_dataset().test;
  const MetricReport report = evaluate(model, test);
  ASSERT_EQ(report.derained.size(), test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    EXPECT_EQ(report.derained[i].psnr, report.baseline[i].psnr);
    EXPECT_EQ(report.derained[i].ssim, report.baseline[i].ssim);
  }
  std::ostringstream a, b;
  write_csv(a, report);
  write_csv(b, evaluate(model, test));
  EXPECT_EQ(a.str(), b.str());
}

TEST(Evaluate, DumpsOneImagePerStage) {
  RescanModel<float> model(small_model(UnitKind::kGru, Framework::kFull, 2), 20);
  const auto out = derain_image(model, toy_dataset().test.front().rainy);
  EXPECT_EQ(out.stages.size(), 2u);
  EXPECT_TRUE(out.background.same_size(toy_dataset().test.front().rainy));
}
