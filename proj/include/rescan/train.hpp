#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "rescan/adam.hpp"
#include "rescan/checkpoint.hpp"
#include "rescan/metrics.hpp"
#include "rescan/rain_sim.hpp"
#include "rescan/scan_model.hpp"

namespace rescan {

struct TrainConfig {
  int patch_size = 64;
  int patches_per_image = 100;
  int batch_size = 16;
  int iterations = 2000;
  double learning_rate = 5e-3;
  std::vector<int> lr_drops = {1200, 1700};
  double drop_factor = 10.0;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  int eval_every = 0;        // 0 disables periodic evaluation
  std::filesystem::path checkpoint_dir;

  /// Batch 64, drops at 15000 and 17500 of 20000 iterations.
  static TrainConfig full_scale() {
    TrainConfig c;
    c.batch_size = 64;
    c.iterations = 20000;
    c.lr_drops = {15000, 17500};
    return c;
  }
};

inline void validate(const TrainConfig& c) {
  if (c.patch_size <= 0) throw ConfigError("patch size must be positive");
  if (c.patches_per_image <= 0) throw ConfigError("patches per image must be positive");
  if (c.batch_size <= 0) throw ConfigError("batch size must be positive");
  if (c.iterations < 0) throw ConfigError("iterations must be >= 0");
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(c.drop_factor > 0.0)) throw ConfigError("drop factor must be positive");
  for (std::size_t i = 0; i < c.lr_drops.size(); ++i) {
    if (c.lr_drops[i] < 0 || c.lr_drops[i] > c.iterations) {
      throw ConfigError("lr drop at " + std::to_string(c.lr_drops[i]) + " outside [0, " +
                        std::to_string(c.iterations) + "]");
    }
    if (i > 0 && c.lr_drops[i] <= c.lr_drops[i - 1]) {
      throw ConfigError("lr drops must be strictly increasing");
    }
  }
}

/// Step schedule: start rate divided by drop_factor once per passed drop.
inline double lr_at(int iteration, const TrainConfig& c) {
  double lr = c.learning_rate;
  for (int drop : c.lr_drops) {
    if (iteration >= drop) lr /= c.drop_factor;
  }
  return lr;
}

// ---------------------------------------------------------------------------
// Patches

struct PatchRef {
  int image = 0;
  int y = 0;
  int x = 0;
};

struct PatchPool {
  int patch_size = 0;
  std::vector<PatchRef> patches;
  std::vector<std::string> warnings;  // skipped images
};

struct PatchPair {
  Image rainy;
  Image residual;
  Image clean;
};

/// `patches_per_image` uniformly placed crops per image, deterministic in seed.
inline PatchPool sample_patches(const std::vector<Sample>& samples, const TrainConfig& config,
                                std::uint64_t seed) {
  PatchPool pool;
  pool.patch_size = config.patch_size;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Image& img = samples[i].rainy;
    if (img.height < config.patch_size || img.width < config.patch_size) {
      pool.warnings.push_back("skipping " + samples[i].name + ": " + std::to_string(img.height) + "x" +
                              std::to_string(img.width) + " is smaller than patch " +
                              std::to_string(config.patch_size));
      continue;
    }
    std::uniform_int_distribution<int> py(0, img.height - config.patch_size);
    std::uniform_int_distribution<int> px(0, img.width - config.patch_size);
    for (int k = 0; k < config.patches_per_image; ++k) {
      const int y = py(rng);
      const int x = px(rng);
      pool.patches.push_back({static_cast<int>(i), y, x});
    }
  }
  return pool;
}

inline PatchPair materialize(const PatchRef& ref, const std::vector<Sample>& samples, int size) {
  const Sample& s = samples.at(ref.image);
  return {crop(s.rainy, ref.y, ref.x, size, size), crop(s.residual, ref.y, ref.x, size, size),
          crop(s.clean, ref.y, ref.x, size, size)};
}

// ---------------------------------------------------------------------------
// Logs

struct EvalRecord {
  int iteration = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct TrainLog {
  std::vector<int> iteration;
  std::vector<double> loss;
  std::vector<double> lr;
  std::vector<EvalRecord> evals;

  bool operator==(const TrainLog& o) const {
    return iteration == o.iteration && loss == o.loss && lr == o.lr &&
           evals.size() == o.evals.size() &&
           std::equal(evals.begin(), evals.end(), o.evals.begin(), [](const auto& a, const auto& b) {
             return a.iteration == b.iteration && a.psnr == b.psnr && a.ssim == b.ssim;
           });
  }
};

inline void write_csv(std::ostream& os, const TrainLog& log) {
  os << "iteration,loss,lr,eval_psnr,eval_ssim\n" << std::setprecision(10);
  std::size_t e = 0;
  for (std::size_t i = 0; i < log.iteration.size(); ++i) {
    os << log.iteration[i] << "," << log.loss[i] << "," << log.lr[i];
    if (e < log.evals.size() && log.evals[e].iteration == log.iteration[i] + 1) {
      os << "," << log.evals[e].psnr << "," << log.evals[e].ssim;
      ++e;
    } else {
      os << ",,";
    }
    os << "\n";
  }
}

inline void write_csv(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write training log: " + path.string());
  write_csv(os, log);
}

// ---------------------------------------------------------------------------
// Inference and evaluation

struct DerainOutput {
  Image background;             // O - R, unclamped
  std::vector<Image> stages;    // per-stage streak predictions
};

template <typename T>
DerainOutput derain_image(const RescanModel<T>& model, const Image& rainy) {
  NoGradGuard no_grad;
  const auto result = rescan_forward(model, to_tensor<T>(rainy));
  DerainOutput out;
  out.background = to_image(result.background);
  for (const auto& s : result.stage_predictions) out.stages.push_back(to_image(s));
  return out;
}

/// Full-image inference on every sample; scores the estimate and the rainy
/// input against the clean image.
template <typename T>
MetricReport evaluate(const RescanModel<T>& model, const std::vector<Sample>& samples) {
  MetricReport report;
  for (const auto& s : samples) {
    const DerainOutput out = derain_image(model, s.rainy);
    report.derained.push_back(score(s.name, out.background, s.clean));
    report.baseline.push_back(score(s.name, s.rainy, s.clean));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Training loop

namespace detail {

// Keeps large activation buffers on the heap between iterations instead of
// returning them to the kernel after every free.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

}  // namespace detail

template <typename T>
struct TrainResult {
  Checkpoint checkpoint;
  TrainLog log;
};

using ProgressFn = std::function<void(int iteration, double loss, double lr)>;

template <typename T>
TrainResult<T> train(RescanModel<T>& model, const std::vector<Sample>& train_samples,
                     const std::vector<Sample>& heldout, const TrainConfig& config,
                     const ProgressFn& progress = {}) {
  validate(config);
  detail::tune_allocator();
  TrainResult<T> result;
  if (config.iterations == 0) {
    result.checkpoint = make_checkpoint(model);
    return result;
  }

  const PatchPool pool = sample_patches(train_samples, config, mix_seed(config.seed, 0x9A7C4));
  if (pool.patches.size() < static_cast<std::size_t>(config.batch_size)) {
    throw ConfigError("patch pool of " + std::to_string(pool.patches.size()) +
                      " is smaller than batch size " + std::to_string(config.batch_size));
  }
  if (!config.checkpoint_dir.empty()) std::filesystem::create_directories(config.checkpoint_dir);

  auto params = model.parameters();
  AdamState<T> adam;
  Checkpoint last_good = make_checkpoint(model);
  const Framework framework = model.config().framework;
  const int size = config.patch_size;

  std::vector<std::size_t> order(pool.patches.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  auto next_patch = [&]() -> const PatchRef& {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 shuffle_rng(mix_seed(config.seed, 0xE90C + epoch++));
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      cursor = 0;
    }
    return pool.patches[order[cursor++]];
  };

  auto abort_with = [&](const std::string& why) {
    if (!config.checkpoint_dir.empty()) {
      load_into(model, last_good);
      save_model(model, config.checkpoint_dir / "last_good.ckpt");
    }
    throw NumericError(why);
  };

  for (int it = 0; it < config.iterations; ++it) {
    const double lr = lr_at(it, config);
    std::vector<PatchPair> batch;
    batch.reserve(config.batch_size);
    for (int b = 0; b < config.batch_size; ++b) batch.push_back(materialize(next_patch(), train_samples, size));
    std::vector<const Image*> rainy, residual;
    for (const auto& p : batch) {
      rainy.push_back(&p.rainy);
      residual.push_back(&p.residual);
    }
    const Tensor<T> input = to_batch<T>(rainy);
    const Tensor<T> target = to_batch<T>(residual);

    zero_grad(params);
    double loss_value = 0.0;
    {
      const auto forward = rescan_forward(model, input);
      Tensor<T> loss = framework_loss(framework, forward.stage_predictions, target);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        abort_with("non-finite loss at iteration " + std::to_string(it));
      }
      backward(loss);
    }
    try {
      adam_step(params, adam, lr);
    } catch (const NumericError& e) {
      abort_with(e.what());
    }

    result.log.iteration.push_back(it);
    result.log.loss.push_back(loss_value);
    result.log.lr.push_back(lr);
    if (progress) progress(it, loss_value, lr);

    const int done = it + 1;
    if (config.eval_every > 0 && !heldout.empty() &&
        (done % config.eval_every == 0 || done == config.iterations)) {
      const MetricReport report = evaluate(model, heldout);
      result.log.evals.push_back({done, report.mean_psnr(), report.mean_ssim()});
    }
    if (config.checkpoint_every > 0 && !config.checkpoint_dir.empty() && done % config.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "iter_%06d.ckpt", done);
      save_model(model, config.checkpoint_dir / name);
    }
    if (config.checkpoint_every > 0 || !config.checkpoint_dir.empty()) last_good = make_checkpoint(model);
  }
  result.checkpoint = make_checkpoint(model);
  return result;
}

}  // namespace rescan
