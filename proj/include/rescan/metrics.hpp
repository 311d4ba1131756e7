#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "rescan/image.hpp"

namespace rescan {

namespace detail {

inline void require_same_metric(const Image& a, const Image& b, const char* what) {
  if (!a.same_size(b)) {
    throw ConfigError(std::string(what) + ": image sizes differ (" + std::to_string(a.channels) + "x" +
                      std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                      std::to_string(b.channels) + "x" + std::to_string(b.height) + "x" +
                      std::to_string(b.width) + ")");
  }
}

}  // namespace detail

/// 10 log10(peak^2 / MSE) over every channel; +inf for identical images.
inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
  detail::require_same_metric(a, b, "psnr");
  if (!(peak > 0.0)) throw ConfigError("psnr: peak must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = static_cast<double>(a.values[i]) - static_cast<double>(b.values[i]);
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.values.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

/// ITU-R BT.601 luma for RGB; single-channel images pass through.
inline std::vector<double> luminance(const Image& img) {
  std::vector<double> y(img.plane());
  if (img.channels == 1) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = img.values[i];
    return y;
  }
  if (img.channels != 3) throw ConfigError("luminance: expected 1 or 3 channels");
  const std::size_t p = img.plane();
  for (std::size_t i = 0; i < p; ++i) {
    y[i] = 0.299 * img.values[i] + 0.587 * img.values[p + i] + 0.114 * img.values[2 * p + i];
  }
  return y;
}

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 1.0;
};

/// Normalised 1-D Gaussian of `size` taps.
inline std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> taps(size);
  const double centre = 0.5 * (size - 1);
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    taps[i] = std::exp(-0.5 * (i - centre) * (i - centre) / (sigma * sigma));
    total += taps[i];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

/// Mean SSIM of the luminance channel over all fully contained Gaussian
/// windows. Images smaller than the window use a window shrunk to the image.
inline double ssim(const Image& a, const Image& b, const SsimParams& p = {}) {
  detail::require_same_metric(a, b, "ssim");
  const std::vector<double> x = luminance(a);
  const std::vector<double> y = luminance(b);
  const int h = a.height, w = a.width;
  const int wy = std::min(p.window, h), wx = std::min(p.window, w);
  const auto gy = gaussian_taps(wy, p.sigma);
  const auto gx = gaussian_taps(wx, p.sigma);
  const int oh = h - wy + 1, ow = w - wx + 1;

  // Separable "valid" filtering of x, y, x^2, y^2, xy.
  auto filter = [&](auto value) {
    std::vector<double> rows(static_cast<std::size_t>(h) * ow);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (int k = 0; k < wx; ++k) acc += gx[k] * value(static_cast<std::size_t>(r) * w + c + k);
        rows[static_cast<std::size_t>(r) * ow + c] = acc;
      }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (int k = 0; k < wy; ++k) acc += gy[k] * rows[static_cast<std::size_t>(r + k) * ow + c];
        out[static_cast<std::size_t>(r) * ow + c] = acc;
      }
    return out;
  };
  const auto mx = filter([&](std::size_t i) { return x[i]; });
  const auto my = filter([&](std::size_t i) { return y[i]; });
  const auto mxx = filter([&](std::size_t i) { return x[i] * x[i]; });
  const auto myy = filter([&](std::size_t i) { return y[i] * y[i]; });
  const auto mxy = filter([&](std::size_t i) { return x[i] * y[i]; });

  const double c1 = (p.k1 * p.peak) * (p.k1 * p.peak);
  const double c2 = (p.k2 * p.peak) * (p.k2 * p.peak);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cov = mxy[i] - mx[i] * my[i];
    total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

struct ImageScore {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<ImageScore> derained;  // estimate vs clean
  std::vector<ImageScore> baseline;  // rainy input vs clean

  static double mean_of(const std::vector<ImageScore>& rows, double ImageScore::*field) {
    if (rows.empty()) return 0.0;
    double total = 0.0;
    for (const auto& r : rows) total += r.*field;
    return total / static_cast<double>(rows.size());
  }
  double mean_psnr() const { return mean_of(derained, &ImageScore::psnr); }
  double mean_ssim() const { return mean_of(derained, &ImageScore::ssim); }
  double baseline_psnr() const { return mean_of(baseline, &ImageScore::psnr); }
  double baseline_ssim() const { return mean_of(baseline, &ImageScore::ssim); }
};

/// Scores an estimate against ground truth after clamping both to [0, 1].
inline ImageScore score(const std::string& name, const Image& estimate, const Image& clean) {
  const Image e = clamp01(estimate);
  const Image c = clamp01(clean);
  return {name, psnr(e, c), ssim(e, c)};
}

inline void write_csv(std::ostream& os, const MetricReport& report) {
  os << "image,psnr,ssim\n" << std::setprecision(10);
  for (const auto& r : report.derained) os << r.name << "," << r.psnr << "," << r.ssim << "\n";
  os << "mean," << report.mean_psnr() << "," << report.mean_ssim() << "\n";
  os << "baseline_mean," << report.baseline_psnr() << "," << report.baseline_ssim() << "\n";
}

inline void write_csv(const std::filesystem::path& path, const MetricReport& report) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write report: " + path.string());
  write_csv(os, report);
  if (!os) throw IoError("failed writing report: " + path.string());
}

inline void write_summary(std::ostream& os, const MetricReport& report) {
  os << std::fixed << std::setprecision(4);
  os << "image                 PSNR(dB)    SSIM   | rainy PSNR  SSIM\n";
  for (std::size_t i = 0; i < report.derained.size(); ++i) {
    const auto& d = report.derained[i];
    os << std::left << std::setw(20) << d.name << std::right << std::setw(10) << d.psnr << std::setw(9)
       << d.ssim;
    if (i < report.baseline.size()) {
      os << "   | " << std::setw(9) << report.baseline[i].psnr << std::setw(8) << report.baseline[i].ssim;
    }
    os << "\n";
  }
  os << std::left << std::setw(20) << "mean" << std::right << std::setw(10) << report.mean_psnr()
     << std::setw(9) << report.mean_ssim() << "   | " << std::setw(9) << report.baseline_psnr()
     << std::setw(8) << report.baseline_ssim() << "\n";
  os.unsetf(std::ios::fixed);
}

}  // namespace rescan
