#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rescan/scan_model.hpp"

namespace rescan {

struct GradCheckReport {
  double max_rel_error = 0.0;
  int checked = 0;
  std::string worst;  // "name[index]" of the worst entry
};

/// Central finite differences of the framework loss against backprop, in
/// double precision, on `samples` distinct random parameter entries.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6).
inline GradCheckReport grad_check(const RescanConfig& config, int samples, std::uint64_t seed,
                                  int image_size = 8, double step = 1e-5) {
  if (samples <= 0) throw ConfigError("grad-check: samples must be positive");
  RescanModel<double> model(config, seed);
  std::mt19937_64 rng(seed ^ 0x6A09E667F3BCC909ULL);
  const Shape shape{2, config.scan.in_channels, image_size, image_size};
  Tensor<double> input(shape), target(Shape{2, config.scan.out_channels, image_size, image_size});
  std::uniform_real_distribution<double> u01(0.0, 1.0), ures(-0.5, 0.5);
  for (auto& v : input.data()) v = u01(rng);
  for (auto& v : target.data()) v = ures(rng);

  auto loss = [&] {
    return framework_loss(config.framework, rescan_forward(model, input).stage_predictions, target);
  };
  auto params = model.parameters();
  {
    Tensor<double> l = loss();
    backward(l);
  }

  std::size_t total = 0;
  for (const auto& [name, p] : params) total += p.numel();
  const std::size_t count = std::min<std::size_t>(samples, total);
  std::vector<std::size_t> flat(total);
  for (std::size_t i = 0; i < total; ++i) flat[i] = i;
  std::shuffle(flat.begin(), flat.end(), rng);
  flat.resize(count);
  std::sort(flat.begin(), flat.end());

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t idx : flat) {
    std::size_t local = idx;
    std::size_t k = 0;
    while (local >= params[k].second.numel()) local -= params[k++].second.numel();
    Tensor<double>& p = params[k].second;
    const double analytic = p.has_grad() ? p.grad()[local] : 0.0;
    double& v = p.data()[local];
    const double saved = v;
    v = saved + step;
    const double up = loss().item();
    v = saved - step;
    const double down = loss().item();
    v = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    if (err >= report.max_rel_error) {
      report.max_rel_error = err;
      report.worst = params[k].first + "[" + std::to_string(local) + "]";
    }
    ++report.checked;
  }
  return report;
}

}  // namespace rescan
