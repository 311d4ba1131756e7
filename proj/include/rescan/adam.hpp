#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rescan/tensor.hpp"

namespace rescan {

template <typename T>
using NamedParam = std::pair<std::string, Tensor<T>>;

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

template <typename T>
void zero_grad(ParamList<T>& params) {
  for (auto& [name, p] : params) p.zero_grad();
}

/// One bias-corrected ADAM update. Parameters without an accumulated
/// gradient are treated as having a zero gradient.
template <typename T>
void adam_step(ParamList<T>& params, AdamState<T>& state, double lr) {
  if (state.first_moment.empty()) {
    for (auto& [name, p] : params) {
      state.first_moment.emplace_back(p.numel(), T(0));
      state.second_moment.emplace_back(p.numel(), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ConfigError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                      " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, p] = params[k];
    if (state.first_moment[k].size() != p.numel()) {
      throw ConfigError("adam_step: moment buffer size mismatch for " + name);
    }
    if (!p.has_grad()) continue;
    auto g = p.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError("adam_step: non-finite gradient in '" + name + "' at element " +
                           std::to_string(i) + " (step " + std::to_string(state.step + 1) + ")");
      }
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(state.beta1);
  const T b2 = static_cast<T>(state.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(state.eps);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].second;
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    auto values = p.data();
    const bool has = p.has_grad();
    std::span<const T> g = has ? std::span<const T>(p.grad()) : std::span<const T>();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T gi = has ? g[i] : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      values[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

}  // namespace rescan
