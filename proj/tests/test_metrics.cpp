#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "metric_oracles.hpp"
#include "rescan/metrics.hpp"

using namespace rescan;
using oracle::psnr_oracle;
using oracle::ssim_oracle;

namespace {

Image random_image(int c, int h, int w, std::mt19937_64& rng) {
  Image img(c, h, w);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : img.values) v = u(rng);
  return img;
}

Image checkerboard(int size) {
  Image img(3, size, size);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) img.at(c, y, x) = ((y / 2 + x / 2) % 2) ? 0.9f : 0.1f;
  return img;
}

}  // namespace

TEST(Psnr, UniformOffsetGivesTwentyDb) {
  Image a(3, 8, 8, 0.5f);
  Image b(3, 8, 8, 0.4f);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-5);
  EXPECT_NEAR(psnr(b, a), psnr(a, b), 0.0);
}

TEST(Psnr, IdenticalImagesAreInfinite) {
  std::mt19937_64 rng(1);
  const Image a = random_image(3, 9, 7, rng);
  EXPECT_EQ(psnr(a, a), std::numeric_limits<double>::infinity());
}

TEST(Psnr, MatchesDirectDefinition) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Image a = random_image(trial % 2 ? 3 : 1, 5 + trial, 17, rng);
    const Image b = random_image(a.channels, a.height, a.width, rng);
    EXPECT_NEAR(psnr(a, b), psnr_oracle(a, b), 1e-9);
    EXPECT_EQ(psnr(a, b), psnr(b, a));
  }
}

TEST(Psnr, ConstantShiftChangesMseBySquare) {
  std::mt19937_64 rng(3);
  const Image a = random_image(3, 8, 8, rng);
  Image b = a;
  for (auto& v : b.values) v += 0.125f;  // exact in float
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(1.0 / (0.125 * 0.125)), 1e-5);
}

TEST(Psnr, RejectsBadArguments) {
  EXPECT_THROW(psnr(Image(3, 4, 4), Image(3, 4, 5)), ConfigError);
  EXPECT_THROW(psnr(Image(3, 4, 4), Image(3, 4, 4), 0.0), ConfigError);
}

TEST(Ssim, IdenticalImagesScoreOne) {
  std::mt19937_64 rng(4);
  const Image a = random_image(3, 20, 24, rng);
  EXPECT_EQ(ssim(a, a), 1.0);
  const Image flat(3, 16, 16, 0.3f);
  EXPECT_EQ(ssim(flat, flat), 1.0);
}

TEST(Ssim, InvertedImageScoresBelowOne) {
  std::mt19937_64 rng(5);
  const Image a = random_image(3, 16, 16, rng);
  Image inv = a;
  for (auto& v : inv.values) v = 1.0f - v;
  const double s = ssim(a, inv);
  EXPECT_LT(s, 1.0);
  EXPECT_GE(s, -1.0);
}

TEST(Ssim, CheckerboardBlendMatchesWindowOracle) {
  const Image board = checkerboard(16);
  Image blend = board;
  for (auto& v : blend.values) v = 0.5f * v + 0.25f;  // 0.5 blend with mid gray
  EXPECT_NEAR(ssim(board, blend), ssim_oracle(board, blend), 1e-4);
  EXPECT_LT(ssim(board, blend), 1.0);
}

TEST(Ssim, RandomPairsMatchWindowOracle) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 8; ++trial) {
    const Image a = random_image(trial % 2 ? 3 : 1, 12 + trial, 15, rng);
    Image b = a;
    std::normal_distribution<float> noise(0.0f, 0.1f);
    for (auto& v : b.values) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
    const double s = ssim(a, b);
    EXPECT_NEAR(s, ssim_oracle(a, b), 1e-4);
    EXPECT_NEAR(s, ssim(b, a), 1e-12);
    EXPECT_LE(s, 1.0);
    EXPECT_GE(s, -1.0);
  }
}

TEST(Ssim, SmallImagesShrinkTheWindow) {
  std::mt19937_64 rng(7);
  const Image a = random_image(1, 6, 9, rng);
  const Image b = random_image(1, 6, 9, rng);
  EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-4);
}

TEST(Report, BaselineAndCsv) {
  std::mt19937_64 rng(8);
  const Image clean = random_image(3, 16, 16, rng);
  Image rainy = clean;
  for (auto& v : rainy.values) v = std::min(1.0f, v + 0.1f);
  MetricReport report;
  report.derained.push_back(score("a", clean, clean));
  report.baseline.push_back(score("a", rainy, clean));
  EXPECT_TRUE(std::isinf(report.mean_psnr()));
  EXPECT_EQ(report.mean_ssim(), 1.0);
  EXPECT_LT(report.baseline_psnr(), 30.0);
  std::ostringstream a, b;
  write_csv(a, report);
  write_csv(b, report);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().rfind("image,psnr,ssim\n", 0), 0u);
  EXPECT_NE(a.str().find("\nbaseline_mean,"), std::string::npos);
}

TEST(Report, ScoresAreClampedFirst) {
  Image clean(1, 12, 12, 1.0f);
  Image over(1, 12, 12, 1.3f);
  EXPECT_TRUE(std::isinf(score("x", over, clean).psnr));
}
