#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rescan/nn_blocks.hpp"

namespace rescan {

struct ScanConfig {
  int depth = 5;  // d, number of conv layers including the 1x1 decoder
  int width = 8;  // channels per hidden layer
  int in_channels = 3;
  int out_channels = 3;
  bool use_se = true;
  bool all_dilation_one = false;  // "Plain" ablation
  double leaky_slope = 0.2;
  int se_ratio = 4;
};

enum class Framework { kIter, kAdditive, kFull };

inline std::string framework_name(Framework f) {
  switch (f) {
    case Framework::kIter: return "iter";
    case Framework::kAdditive: return "additive";
    case Framework::kFull: return "full";
  }
  return "additive";
}

inline Framework parse_framework(const std::string& name) {
  if (name == "iter") return Framework::kIter;
  if (name == "additive" || name == "add") return Framework::kAdditive;
  if (name == "full") return Framework::kFull;
  throw ConfigError("unknown framework '" + name + "' (expected iter|additive|full)");
}

struct RescanConfig {
  ScanConfig scan;
  int stages = 4;
  UnitKind unit = UnitKind::kGru;
  Framework framework = Framework::kFull;
};

/// Plain SCAN: one stage, no recurrence.
inline RescanConfig scan_only(const ScanConfig& scan) {
  RescanConfig config;
  config.scan = scan;
  config.stages = 1;
  config.unit = UnitKind::kNone;
  config.framework = Framework::kAdditive;
  return config;
}

inline void validate(const ScanConfig& c) {
  if (c.depth < 4) throw ConfigError("depth must be >= 4, got " + std::to_string(c.depth));
  if (c.width <= 0) throw ConfigError("width must be positive");
  if (c.in_channels <= 0 || c.out_channels <= 0) throw ConfigError("channel counts must be positive");
  if (!(c.leaky_slope > 0.0 && c.leaky_slope < 1.0)) throw ConfigError("leaky slope must lie in (0, 1)");
  if (c.use_se && (c.se_ratio <= 0 || c.width % c.se_ratio != 0)) {
    throw ConfigError("width " + std::to_string(c.width) + " not divisible by SE ratio " +
                      std::to_string(c.se_ratio));
  }
}

inline void validate(const RescanConfig& c) {
  validate(c.scan);
  if (c.stages < 1 || c.stages > 8) {
    throw ConfigError("stages must lie in [1, 8], got " + std::to_string(c.stages));
  }
  if (c.framework == Framework::kIter && c.unit != UnitKind::kNone) {
    throw ConfigError("framework iter keeps no state across stages; unit must be none, got " +
                      unit_name(c.unit));
  }
}

/// Per-layer dilation: [1, 1, 2, 4, ..., 2^(d-4), 1, 1]. The last entry is
/// the 1x1 decoder.
inline std::vector<int> dilation_schedule(const ScanConfig& c) {
  validate(c);
  std::vector<int> schedule(c.depth, 1);
  if (!c.all_dilation_one) {
    for (int j = 1; j <= c.depth - 3; ++j) schedule[j] = 1 << (j - 1);
  }
  return schedule;
}

/// Side length of the SCAN receptive field, 2^(d-2) + 3.
inline int receptive_field(int depth) {
  if (depth < 4) throw ConfigError("receptive_field: depth must be >= 4, got " + std::to_string(depth));
  return (1 << (depth - 2)) + 3;
}

/// Receptive field side implied by an arbitrary schedule: 1 + sum 2*dilation
/// over the 3x3 layers.
inline int receptive_field(const ScanConfig& c) {
  const auto schedule = dilation_schedule(c);
  int side = 1;
  for (int j = 0; j + 1 < c.depth; ++j) side += 2 * schedule[j];
  return side;
}

/// Closed-form trainable parameter count. 3x3 input kernels carry a bias per
/// output channel; state kernels are 3x3 without bias; SE is two biased 1x1
/// convs through width/ratio channels; the decoder is a biased 1x1 conv.
inline std::size_t analytic_parameter_count(const RescanConfig& c) {
  validate(c);
  const std::size_t w = c.scan.width;
  std::size_t total = 0;
  for (int j = 0; j + 1 < c.scan.depth; ++j) {
    const std::size_t in = j == 0 ? c.scan.in_channels : w;
    const std::size_t g = gate_count(c.unit == UnitKind::kNone ? UnitKind::kRnn : c.unit);
    total += g * w * in * 9 + g * w;
    if (c.unit != UnitKind::kNone) total += g * w * w * 9;  // GRU: 2w state gates + w candidate
    if (c.scan.use_se) {
      const std::size_t r = w / c.scan.se_ratio;
      total += r * w + r + w * r + w;
    }
  }
  total += static_cast<std::size_t>(c.scan.out_channels) * w + c.scan.out_channels;
  return total;
}

template <typename T>
struct FeatureLayer {
  int dilation = 1;
  bool recurrent = false;
  ConvKernel<T> conv;      // stateless layers
  RecurrentUnit<T> unit;   // recurrent layers
  bool has_se = false;
  SEBlock<T> se;
};

template <typename T>
struct LayerState {
  Tensor<T> hidden;  // undefined means zeros
  Tensor<T> cell;    // ConvLSTM only
};

template <typename T>
using StageState = std::vector<LayerState<T>>;

/// SCAN body shared by every stage: layers L_0 .. L_{d-2} are 3x3 (optionally
/// recurrent) with leaky ReLU and SE, L_{d-1} is a plain 1x1 decoder.
template <typename T>
class RescanModel {
 public:
  RescanModel(const RescanConfig& config, std::uint64_t seed) : config_(config) {
    validate(config_);
    std::mt19937_64 rng(seed);
    const auto& sc = config_.scan;
    const auto schedule = dilation_schedule(sc);
    for (int j = 0; j + 1 < sc.depth; ++j) {
      const int in = (j == 0) ? sc.in_channels : sc.width;
      FeatureLayer<T> layer;
      layer.dilation = schedule[j];
      if (config_.unit == UnitKind::kNone) {
        layer.conv = make_conv<T>(in, sc.width, 3, schedule[j], true, rng, sc.leaky_slope);
      } else {
        layer.recurrent = true;
        layer.unit = make_unit<T>(config_.unit, in, sc.width, schedule[j], rng, sc.leaky_slope);
      }
      if (sc.use_se) {
        layer.has_se = true;
        layer.se = make_se<T>(sc.width, sc.se_ratio, rng, sc.leaky_slope);
      }
      layers_.push_back(std::move(layer));
    }
    decoder_ = make_conv<T>(sc.width, sc.out_channels, 1, 1, true, rng, sc.leaky_slope);
  }

  const RescanConfig& config() const { return config_; }
  const std::vector<FeatureLayer<T>>& layers() const { return layers_; }
  const ConvKernel<T>& decoder() const { return decoder_; }

  /// Every trainable tensor in a fixed order with stable names.
  ParamList<T> parameters() const {
    ParamList<T> out;
    for (std::size_t j = 0; j < layers_.size(); ++j) {
      const std::string prefix = "layer" + std::to_string(j);
      const auto& layer = layers_[j];
      if (layer.recurrent) {
        collect(out, prefix + ".unit", layer.unit);
      } else {
        collect(out, prefix + ".conv", layer.conv);
      }
      if (layer.has_se) collect(out, prefix + ".se", layer.se);
    }
    collect(out, "decoder", decoder_);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, p] : parameters()) total += p.numel();
    return total;
  }

  StageState<T> initial_state() const { return StageState<T>(layers_.size()); }

  /// One pass of the network. Recurrent layers read and update `state`.
  Tensor<T> stage(const Tensor<T>& input, StageState<T>& state) const {
    const auto& sc = config_.scan;
    if (input.shape().c != sc.in_channels) {
      throw ConfigError("model expects " + std::to_string(sc.in_channels) +
                        " input channels, got " + input.shape().str());
    }
    if (state.size() != layers_.size()) state = initial_state();
    const T slope = static_cast<T>(sc.leaky_slope);
    Tensor<T> x = input;
    for (std::size_t j = 0; j < layers_.size(); ++j) {
      const auto& layer = layers_[j];
      if (!layer.recurrent) {
        x = conv_se_layer(x, layer.conv, layer.has_se ? &layer.se : nullptr, slope);
        continue;
      }
      auto& st = state[j];
      switch (layer.unit.kind) {
        case UnitKind::kRnn: st.hidden = convrnn_step(x, st.hidden, layer.unit); break;
        case UnitKind::kGru: st.hidden = convgru_step(x, st.hidden, layer.unit); break;
        case UnitKind::kLstm: {
          auto [h, c] = convlstm_step(x, st.hidden, st.cell, layer.unit);
          st.hidden = h;
          st.cell = c;
          break;
        }
        case UnitKind::kNone: break;
      }
      x = layer.has_se ? se_forward(st.hidden, layer.se, slope) : st.hidden;
    }
    return conv2d(x, decoder_);
  }

  std::vector<FeatureLayer<T>>& mutable_layers() { return layers_; }
  ConvKernel<T>& mutable_decoder() { return decoder_; }

 private:
  RescanConfig config_;
  std::vector<FeatureLayer<T>> layers_;
  ConvKernel<T> decoder_;
};

/// Single-stage streak prediction from a fresh (zero) state.
template <typename T>
Tensor<T> scan_forward(const RescanModel<T>& model, const Tensor<T>& rainy) {
  StageState<T> state = model.initial_state();
  return model.stage(rainy, state);
}

template <typename T>
struct DerainResult {
  std::vector<Tensor<T>> stage_predictions;  // R_s (Iter/Additive) or R-hat_s (Full)
  Tensor<T> streaks;                          // final R
  Tensor<T> background;                       // O - R
  StageState<T> state;                        // after the last stage
};

/// Multi-stage deraining.
///   Iter:     R_s = f(O_s), fresh state, O_{s+1} = O_s - R_s, R = sum R_s
///   Additive: R_s = f(O_s, x_{s-1}), O_{s+1} = O - sum_{j<=s} R_j, R = sum R_s
///   Full:     R_s = f(O_s, x_{s-1}), O_{s+1} = O - R_s, R = R_S
template <typename T>
DerainResult<T> rescan_forward(const RescanModel<T>& model, const Tensor<T>& rainy) {
  const auto& config = model.config();
  validate(config);
  DerainResult<T> result;
  result.state = model.initial_state();
  Tensor<T> current = rainy;
  Tensor<T> cumulative;
  for (int s = 0; s < config.stages; ++s) {
    Tensor<T> pred;
    if (config.framework == Framework::kIter) {
      StageState<T> fresh = model.initial_state();
      pred = model.stage(current, fresh);
      result.state = std::move(fresh);
    } else {
      pred = model.stage(current, result.state);
    }
    result.stage_predictions.push_back(pred);
    switch (config.framework) {
      case Framework::kIter:
        cumulative = cumulative.defined() ? add(cumulative, pred) : pred;
        current = sub(current, pred);
        break;
      case Framework::kAdditive:
        cumulative = cumulative.defined() ? add(cumulative, pred) : pred;
        current = sub(rainy, cumulative);
        break;
      case Framework::kFull:
        cumulative = pred;
        current = sub(rainy, pred);
        break;
    }
  }
  result.streaks = cumulative;
  result.background = sub(rainy, cumulative);
  return result;
}

struct FieldProbe {
  int height = 0;  // rows of the output footprint
  int width = 0;   // columns of the output footprint
  int side() const { return std::max(height, width); }
};

/// Empirical receptive field: perturbs the centre pixel of a zero image and
/// measures the footprint of changed outputs. SE is disabled because its
/// global pooling couples every pixel; weights are made positive and biases
/// zero so no contribution can cancel.
inline FieldProbe probe_receptive_field(ScanConfig scan, std::uint64_t seed = 1) {
  scan.use_se = false;
  scan.in_channels = 1;
  scan.out_channels = 1;
  RescanModel<double> model(scan_only(scan), seed);
  auto positive = [](ConvKernel<double>& k) {
    for (auto& v : k.weight.data()) v = std::abs(v) + 0.05;
    for (auto& v : k.bias.data()) v = 0.0;
  };
  for (auto& layer : model.mutable_layers()) positive(layer.conv);
  positive(model.mutable_decoder());

  const int analytic = receptive_field(scan);
  const int size = 2 * analytic + 9;
  const int centre = size / 2;
  NoGradGuard no_grad;
  Tensor<double> input({1, 1, size, size});
  input.at(0, 0, centre, centre) = 1.0;
  const Tensor<double> out = scan_forward(model, input);

  int top = size, bottom = -1, left = size, right = -1;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      if (out.at(0, 0, y, x) != 0.0) {
        top = std::min(top, y);
        bottom = std::max(bottom, y);
        left = std::min(left, x);
        right = std::max(right, x);
      }
    }
  if (bottom < 0) return {};
  return {bottom - top + 1, right - left + 1};
}

/// sum_s mse(sum_{j<=s} R_j, R).
template <typename T>
Tensor<T> loss_additive(const std::vector<Tensor<T>>& stage_predictions, const Tensor<T>& target) {
  if (stage_predictions.empty()) throw ConfigError("loss_additive: no stage predictions");
  Tensor<T> running;
  Tensor<T> total;
  for (const auto& pred : stage_predictions) {
    running = running.defined() ? add(running, pred) : pred;
    auto term = mse_loss(running, target);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

/// sum_s mse(R-hat_s, R).
template <typename T>
Tensor<T> loss_full(const std::vector<Tensor<T>>& stage_predictions, const Tensor<T>& target) {
  if (stage_predictions.empty()) throw ConfigError("loss_full: no stage predictions");
  Tensor<T> total;
  for (const auto& pred : stage_predictions) {
    auto term = mse_loss(pred, target);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

/// Training objective matching the configured framework.
template <typename T>
Tensor<T> framework_loss(Framework framework, const std::vector<Tensor<T>>& stage_predictions,
                         const Tensor<T>& target) {
  return framework == Framework::kFull ? loss_full(stage_predictions, target)
                                       : loss_additive(stage_predictions, target);
}

}  // namespace rescan
