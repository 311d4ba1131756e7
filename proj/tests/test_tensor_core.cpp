#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "rescan/adam.hpp"
#include "rescan/ops.hpp"

using namespace rescan;

namespace {

Tensor<double> param(Shape s, std::mt19937_64& rng) {
  auto t = oracle::random_tensor<double>(s, rng);
  t.set_requires_grad(true);
  return t;
}

std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(Conv2d, OnesKernelCenterIsNine) {
  Tensor<float> x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  Tensor<float> w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  Tensor<float> b = Tensor<float>::zeros({1, 1, 1, 1});
  auto y = conv2d(x, w, b, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_FLOAT_EQ(y.at(0, 0, 1, 1), 9.0f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 0, 0), 4.0f);
}

TEST(Conv2d, IdentityPointwiseKernel) {
  std::mt19937_64 rng(1);
  auto x = oracle::random_tensor<float>({2, 1, 5, 4}, rng);
  Tensor<float> w = Tensor<float>::full({1, 1, 1, 1}, 1.0f);
  Tensor<float> b = Tensor<float>::zeros({1, 1, 1, 1});
  auto y = conv2d(x, w, b, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  std::mt19937_64 rng(2);
  auto x = oracle::random_tensor<float>({2, 3, 8, 8}, rng);
  auto w = oracle::random_tensor<float>({4, 3, 3, 3}, rng);
  auto b = oracle::random_tensor<float>({1, 4, 1, 1}, rng);
  auto y = conv2d(x, w, b, 2);
  const auto expect = oracle::naive_conv(to_double(x.data()), 2, 3, 8, 8, to_double(w.data()), 4,
                                         3, to_double(b.data()), 2);
  ASSERT_EQ(y.numel(), expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y.data()[i], expect[i], 1e-5);
}

TEST(Conv2d, SamePaddingForEveryDilation) {
  std::mt19937_64 rng(3);
  for (int dilation : {1, 2, 4, 8, 16}) {
    for (int k : {1, 3}) {
      auto x = oracle::random_tensor<float>({1, 2, 13, 9}, rng);
      auto w = oracle::random_tensor<float>({3, 2, k, k}, rng);
      auto y = conv2d(x, w, Tensor<float>(), dilation);
      EXPECT_EQ(y.shape(), (Shape{1, 3, 13, 9}));
    }
  }
}

TEST(Conv2d, RejectsBadShapes) {
  Tensor<float> x({1, 2, 4, 4});
  Tensor<float> w({1, 3, 3, 3});
  try {
    conv2d(x, w, Tensor<float>(), 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(1, 2, 4, 4)"), std::string::npos);
    EXPECT_NE(msg.find("(1, 3, 3, 3)"), std::string::npos);
  }
  Tensor<float> even({1, 2, 2, 2});
  EXPECT_THROW(conv2d(x, even, Tensor<float>(), 1), ConfigError);
  Tensor<float> ok({1, 2, 3, 3});
  EXPECT_THROW(conv2d(x, ok, Tensor<float>(), 0), ConfigError);
}

TEST(Conv2d, LinearInInput) {
  std::mt19937_64 rng(4);
  auto a = oracle::random_tensor<float>({1, 2, 7, 7}, rng);
  auto b = oracle::random_tensor<float>({1, 2, 7, 7}, rng);
  auto w = oracle::random_tensor<float>({3, 2, 3, 3}, rng);
  auto bias = oracle::random_tensor<float>({1, 3, 1, 1}, rng);
  auto lhs = conv2d(add(a, b), w, bias, 2);
  auto rhs = add(conv2d(a, w, Tensor<float>(), 2), conv2d(b, w, bias, 2));
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs.data()[i], rhs.data()[i], 1e-5);
}

TEST(Activations, LeakyRelu) {
  Tensor<double> x({1, 1, 1, 2}, std::vector<double>{2.0, -1.0});
  auto y = leaky_relu(x, 0.2);
  EXPECT_DOUBLE_EQ(y.data()[0], 2.0);
  EXPECT_DOUBLE_EQ(y.data()[1], -0.2);
  EXPECT_THROW(leaky_relu(x, 1.5), ConfigError);
}

TEST(Activations, LeakyReluGradientMatchesFiniteDifference) {
  Tensor<double> x({1, 1, 1, 1}, std::vector<double>{-3.0});
  x.set_requires_grad(true);
  auto y = sum(leaky_relu(x, 0.2));
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.2);
  const double h = 1e-6;
  auto f = [](double v) { return v > 0 ? v : 0.2 * v; };
  const double fd = (f(-3.0 + h) - f(-3.0 - h)) / (2 * h);
  EXPECT_NEAR(x.grad()[0], fd, 1e-6);
}

TEST(Activations, SigmoidTanhValues) {
  Tensor<double> zero({1, 1, 1, 1});
  EXPECT_DOUBLE_EQ(sigmoid(zero).item(), 0.5);
  EXPECT_DOUBLE_EQ(tanh(zero).item(), 0.0);
  Tensor<double> extremes({1, 1, 1, 2}, std::vector<double>{30.0, -30.0});
  auto s = sigmoid(extremes);
  // 1 / (1 + e^30) = 9.357622968839...e-14
  EXPECT_NEAR(s.data()[0], 1.0, 1e-9);
  EXPECT_NEAR(s.data()[1], 0.0, 1e-9);
  EXPECT_NEAR(s.data()[1], 9.357622968839e-14, 1e-24);
  Tensor<float> huge({1, 1, 1, 2}, std::vector<float>{-1000.0f, 1000.0f});
  auto sf = sigmoid(huge);
  EXPECT_TRUE(std::isfinite(sf.data()[0]));
  EXPECT_EQ(sf.data()[1], 1.0f);
}

TEST(Elementwise, MulAndChannelBroadcast) {
  std::mt19937_64 rng(5);
  auto a = oracle::random_tensor<float>({1, 2, 2, 2}, rng);
  auto ones = Tensor<float>::full({1, 2, 2, 2}, 1.0f);
  auto same = mul(a, ones);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(same.data()[i], a.data()[i]);

  Tensor<float> w({1, 2, 1, 1}, std::vector<float>{0.5f, 2.0f});
  auto scaled = mul(a, w);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      EXPECT_FLOAT_EQ(scaled.at(0, 0, y, x), 0.5f * a.at(0, 0, y, x));
      EXPECT_FLOAT_EQ(scaled.at(0, 1, y, x), 2.0f * a.at(0, 1, y, x));
    }
  Tensor<float> bad({1, 3, 1, 1});
  EXPECT_THROW(mul(a, bad), ConfigError);
  EXPECT_THROW(add(a, bad), ConfigError);
  EXPECT_THROW(sub(a, bad), ConfigError);
}

TEST(Elementwise, ChannelWeightGradientIsWeightedSum) {
  std::mt19937_64 rng(6);
  auto a = param({2, 3, 4, 5}, rng);
  auto w = param({2, 3, 1, 1}, rng);
  auto up = oracle::random_tensor<double>({2, 3, 4, 5}, rng);
  auto loss_fn = [&] { return sum(mul(mul(a, w), up)); };
  auto loss = loss_fn();
  backward(loss);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double expect = 0.0;
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) expect += a.at(n, c, y, x) * up.at(n, c, y, x);
      EXPECT_NEAR(w.grad()[n * 3 + c], expect, 1e-12);
    }
  auto check = oracle::finite_difference_check({&w, &a}, [&] { return loss_fn().item(); }, 40,
                                               rng);
  EXPECT_LT(check.max_rel_error, 1e-4);
}

TEST(Pooling, GlobalAveragePool) {
  Tensor<float> seven = Tensor<float>::full({1, 1, 3, 5}, 7.0f);
  EXPECT_FLOAT_EQ(global_avg_pool(seven).item(), 7.0f);
  Tensor<float> four({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_FLOAT_EQ(global_avg_pool(four).item(), 2.5f);
  EXPECT_EQ(global_avg_pool(Tensor<float>({2, 3, 4, 4})).shape(), (Shape{2, 3, 1, 1}));

  std::mt19937_64 rng(7);
  auto x = param({2, 2, 3, 4}, rng);
  auto up = oracle::random_tensor<double>({2, 2, 1, 1}, rng);
  auto f = [&] { return sum(mul(global_avg_pool(x), up)); };
  auto loss = f();
  backward(loss);
  auto check = oracle::finite_difference_check({&x}, [&] { return f().item(); }, 48, rng);
  EXPECT_LT(check.max_rel_error, 1e-5);
}

TEST(Loss, MeanSquaredError) {
  std::mt19937_64 rng(8);
  auto p = oracle::random_tensor<double>({1, 3, 4, 4}, rng);
  EXPECT_DOUBLE_EQ(mse_loss(p, p.clone()).item(), 0.0);
  auto shifted = p.clone();
  for (auto& v : shifted.data()) v += 0.1;
  EXPECT_NEAR(mse_loss(shifted, p).item(), 0.01, 1e-15);
  EXPECT_THROW(mse_loss(p, Tensor<double>({1, 3, 4, 3})), ConfigError);

  auto pred = param({2, 3, 4, 4}, rng);
  auto target = oracle::random_tensor<double>({2, 3, 4, 4}, rng);
  auto f = [&] { return mse_loss(pred, target); };
  auto loss = f();
  backward(loss);
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    EXPECT_NEAR(pred.grad()[i], 2.0 * (pred.data()[i] - target.data()[i]) / pred.numel(), 1e-15);
  }
  auto check = oracle::finite_difference_check({&pred}, [&] { return f().item(); }, 50, rng);
  EXPECT_LT(check.max_rel_error, 1e-6);
}

TEST(Backward, LinearFormAndAccumulation) {
  std::mt19937_64 rng(9);
  auto w = param({1, 2, 3, 3}, rng);
  auto x = oracle::random_tensor<double>({1, 2, 3, 3}, rng);
  auto loss = sum(mul(w, x));
  backward(loss);
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], x.data()[i]);

  // Reusing a tensor sums both contributions.
  w.zero_grad();
  auto twice = sum(add(mul(w, x), mul(w, x)));
  backward(twice);
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], 2.0 * x.data()[i]);

  // A second sweep without zero_grad accumulates.
  auto again = sum(mul(w, x));
  backward(again);
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], 3.0 * x.data()[i]);
}

TEST(Backward, RejectsNonScalarRoot) {
  Tensor<double> x({1, 1, 2, 2});
  x.set_requires_grad(true);
  auto y = tanh(x);
  EXPECT_THROW(backward(y), ConfigError);
}

TEST(Backward, NoGradGuardSkipsRecording) {
  Tensor<double> x({1, 1, 2, 2});
  x.set_requires_grad(true);
  NoGradGuard guard;
  auto y = sum(tanh(x));
  EXPECT_FALSE(y.requires_grad());
}

// Property: every differentiable op matches central differences on random
// shapes and seeds.
TEST(GradientProperty, EveryOpOnRandomShapes) {
  for (int seed = 0; seed < 24; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::uniform_int_distribution<int> dim(1, 4);
    std::uniform_int_distribution<int> spatial(3, 7);
    const int n = dim(rng), c = dim(rng), h = spatial(rng), w = spatial(rng);
    const int cout = dim(rng);
    const int k = (seed % 2 == 0) ? 3 : 1;
    const int dilation = 1 << (seed % 3);
    auto x = param({n, c, h, w}, rng);
    auto other = param({n, cout, h, w}, rng);
    auto weight = param({cout, c, k, k}, rng);
    auto bias = param({1, cout, 1, 1}, rng);
    auto gates = param({n, cout, 1, 1}, rng);
    auto target = oracle::random_tensor<double>({n, cout, h, w}, rng);
    auto f = [&] {
      auto y = conv2d(x, weight, bias, dilation);
      auto a = leaky_relu(y, 0.2);
      auto b = mul(sigmoid(a), tanh(other));
      auto pooled = sigmoid(global_avg_pool(b));
      auto c2 = mul(sub(add(b, a), one_minus(other)), gates);
      auto d = mul(c2, pooled);
      auto sl = slice_channels(d, 0, cout);
      return mse_loss(sl, target);
    };
    auto loss = f();
    backward(loss);
    auto check = oracle::finite_difference_check({&x, &other, &weight, &bias, &gates},
                                                 [&] { return f().item(); }, 30, rng);
    EXPECT_LT(check.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<float> p = Tensor<float>::full({1, 1, 1, 3}, 1.0f);
  p.set_requires_grad(true);
  for (auto& g : p.grad()) g = 1.0f;
  ParamList<float> params{{"p", p}};
  AdamState<float> state;
  adam_step(params, state, 5e-3);
  // m_hat = 1, v_hat = 1: delta = lr / (1 + eps)
  for (float v : p.data()) EXPECT_NEAR(v, 1.0f - 5e-3f / (1.0f + 1e-8f), 1e-7);
  EXPECT_EQ(state.step, 1);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Tensor<float> p = Tensor<float>::full({1, 1, 2, 2}, 0.25f);
  p.set_requires_grad(true);
  p.grad();
  ParamList<float> params{{"p", p}};
  AdamState<float> state;
  adam_step(params, state, 5e-3);
  for (float v : p.data()) EXPECT_EQ(v, 0.25f);
}

TEST(Adam, NonFiniteGradientAborts) {
  Tensor<float> p({1, 1, 1, 2});
  p.set_requires_grad(true);
  p.grad()[1] = std::numeric_limits<float>::quiet_NaN();
  ParamList<float> params{{"layer0.weight", p}};
  AdamState<float> state;
  try {
    adam_step(params, state, 1e-3);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.weight"), std::string::npos);
  }
  EXPECT_EQ(state.step, 0);
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    std::mt19937_64 rng(11);
    auto w = oracle::random_tensor<float>({2, 2, 3, 3}, rng);
    w.set_requires_grad(true);
    auto x = oracle::random_tensor<float>({1, 2, 6, 6}, rng);
    auto t = oracle::random_tensor<float>({1, 2, 6, 6}, rng);
    ParamList<float> params{{"w", w}};
    AdamState<float> state;
    for (int i = 0; i < 5; ++i) {
      zero_grad(params);
      auto loss = mse_loss(conv2d(x, w, Tensor<float>(), 2), t);
      backward(loss);
      adam_step(params, state, 5e-3);
    }
    return std::vector<float>(w.data().begin(), w.data().end());
  };
  EXPECT_EQ(run(), run());
}
