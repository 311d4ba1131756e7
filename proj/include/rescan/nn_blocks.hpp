#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rescan/adam.hpp"
#include "rescan/ops.hpp"

namespace rescan {

/// Dilated square convolution kernel. `bias` may be undefined (state-to-state
/// kernels of the recurrent units carry no bias).
template <typename T>
struct ConvKernel {
  Tensor<T> weight;  // (out, in, k, k)
  Tensor<T> bias;    // (1, out, 1, 1) or undefined
  int dilation = 1;

  int out_channels() const { return weight.shape().n; }
  int in_channels() const { return weight.shape().c; }
  int size() const { return weight.shape().h; }
  int padding() const { return dilation * (size() - 1) / 2; }
  std::size_t weight_count() const { return weight.numel(); }
};

/// He-normal initialised kernel; std = sqrt(2 / ((1 + slope^2) * fan_in)).
template <typename T>
ConvKernel<T> make_conv(int in, int out, int k, int dilation, bool with_bias, std::mt19937_64& rng,
                        double slope = 0.2) {
  if (k != 1 && k != 3) throw ConfigError("kernel size must be 1 or 3, got " + std::to_string(k));
  if (in <= 0 || out <= 0) throw ConfigError("conv channel counts must be positive");
  ConvKernel<T> conv;
  conv.dilation = dilation;
  conv.weight = Tensor<T>(Shape{out, in, k, k});
  const double fan_in = static_cast<double>(in) * k * k;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / ((1.0 + slope * slope) * fan_in)));
  for (auto& v : conv.weight.data()) v = static_cast<T>(dist(rng));
  conv.weight.set_requires_grad(true);
  if (with_bias) conv.bias = Tensor<T>(Shape{1, out, 1, 1}).set_requires_grad(true);
  return conv;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvKernel<T>& kernel) {
  return conv2d(input, kernel.weight, kernel.bias, kernel.dilation);
}

template <typename T>
void collect(ParamList<T>& out, const std::string& prefix, const ConvKernel<T>& conv) {
  out.emplace_back(prefix + ".weight", conv.weight);
  if (conv.bias.defined()) out.emplace_back(prefix + ".bias", conv.bias);
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation

template <typename T>
struct SEBlock {
  ConvKernel<T> reduce;  // 1x1, C -> C / ratio
  ConvKernel<T> expand;  // 1x1, C / ratio -> C
  int ratio = 4;

  int channels() const { return reduce.in_channels(); }
};

template <typename T>
SEBlock<T> make_se(int channels, int ratio, std::mt19937_64& rng, double slope = 0.2) {
  if (ratio <= 0 || channels % ratio != 0) {
    throw ConfigError("SE block: " + std::to_string(channels) +
                      " channels not divisible by ratio " + std::to_string(ratio));
  }
  SEBlock<T> se;
  se.ratio = ratio;
  se.reduce = make_conv<T>(channels, channels / ratio, 1, 1, true, rng, slope);
  se.expand = make_conv<T>(channels / ratio, channels, 1, 1, true, rng, slope);
  return se;
}

/// Per-channel weights in (0, 1): sigmoid(expand(lrelu(reduce(gap(x))))).
template <typename T>
Tensor<T> se_weights(const Tensor<T>& features, const SEBlock<T>& se, T slope) {
  if (features.shape().c != se.channels()) {
    throw ConfigError("SE block expects " + std::to_string(se.channels()) +
                      " channels, got " + features.shape().str());
  }
  auto squeezed = global_avg_pool(features);
  auto hidden = leaky_relu(conv2d(squeezed, se.reduce), slope);
  return sigmoid(conv2d(hidden, se.expand));
}

template <typename T>
Tensor<T> se_forward(const Tensor<T>& features, const SEBlock<T>& se, T slope) {
  return mul(features, se_weights(features, se, slope));
}

template <typename T>
void collect(ParamList<T>& out, const std::string& prefix, const SEBlock<T>& se) {
  collect(out, prefix + ".reduce", se.reduce);
  collect(out, prefix + ".expand", se.expand);
}

/// se(lrelu(conv(x))) when `se` is present, lrelu(conv(x)) otherwise.
template <typename T>
Tensor<T> conv_se_layer(const Tensor<T>& input, const ConvKernel<T>& kernel,
                        const SEBlock<T>* se, T slope) {
  auto activated = leaky_relu(conv2d(input, kernel), slope);
  if (se == nullptr) return activated;
  return se_forward(activated, *se, slope);
}

// ---------------------------------------------------------------------------
// Convolutional recurrent units
//
// Gate kernels are fused along the output-channel axis so one convolution
// serves every gate reading the same operand:
//   ConvRNN : input = [W]            state = [U]
//   ConvGRU : input = [W_z W_r W_n]  state = [U_z U_r], state_candidate = [U_n]
//   ConvLSTM: input = [W_i W_f W_o W_g]  state = [U_i U_f U_o U_g]
// Biases live on the input-side kernel only. Input kernels use the layer's
// dilation; state kernels are undilated 3x3.

enum class UnitKind { kNone, kRnn, kGru, kLstm };

inline int gate_count(UnitKind kind) {
  switch (kind) {
    case UnitKind::kRnn: return 1;
    case UnitKind::kGru: return 3;
    case UnitKind::kLstm: return 4;
    case UnitKind::kNone: break;
  }
  return 0;
}

inline std::string unit_name(UnitKind kind) {
  switch (kind) {
    case UnitKind::kNone: return "none";
    case UnitKind::kRnn: return "rnn";
    case UnitKind::kGru: return "gru";
    case UnitKind::kLstm: return "lstm";
  }
  return "none";
}

inline UnitKind parse_unit(const std::string& name) {
  if (name == "none" || name == "iter") return UnitKind::kNone;
  if (name == "rnn" || name == "convrnn") return UnitKind::kRnn;
  if (name == "gru" || name == "convgru") return UnitKind::kGru;
  if (name == "lstm" || name == "convlstm") return UnitKind::kLstm;
  throw ConfigError("unknown recurrent unit '" + name + "' (expected none|rnn|gru|lstm)");
}

template <typename T>
struct RecurrentUnit {
  UnitKind kind = UnitKind::kGru;
  int width = 0;
  ConvKernel<T> input_gates;
  ConvKernel<T> state_gates;
  ConvKernel<T> state_candidate;  // GRU only

  std::size_t weight_count() const {
    std::size_t total = input_gates.weight_count() + state_gates.weight_count();
    if (state_candidate.weight.defined()) total += state_candidate.weight_count();
    return total;
  }
};

template <typename T>
RecurrentUnit<T> make_unit(UnitKind kind, int in, int width, int dilation, std::mt19937_64& rng,
                           double slope = 0.2) {
  if (kind == UnitKind::kNone) throw ConfigError("make_unit: kind must not be none");
  const int gates = gate_count(kind);
  RecurrentUnit<T> unit;
  unit.kind = kind;
  unit.width = width;
  unit.input_gates = make_conv<T>(in, gates * width, 3, dilation, true, rng, slope);
  if (kind == UnitKind::kGru) {
    unit.state_gates = make_conv<T>(width, 2 * width, 3, 1, false, rng, slope);
    unit.state_candidate = make_conv<T>(width, width, 3, 1, false, rng, slope);
  } else {
    unit.state_gates = make_conv<T>(width, gates * width, 3, 1, false, rng, slope);
  }
  return unit;
}

template <typename T>
void collect(ParamList<T>& out, const std::string& prefix, const RecurrentUnit<T>& unit) {
  collect(out, prefix + ".W", unit.input_gates);
  collect(out, prefix + ".U", unit.state_gates);
  if (unit.state_candidate.weight.defined()) collect(out, prefix + ".Un", unit.state_candidate);
}

namespace detail {

template <typename T>
void check_step_shapes(const Tensor<T>& x_in, const Tensor<T>& h_prev,
                       const RecurrentUnit<T>& unit) {
  if (x_in.shape().c != unit.input_gates.in_channels()) {
    throw ConfigError("recurrent step: input " + x_in.shape().str() + " does not match unit with " +
                      std::to_string(unit.input_gates.in_channels()) + " input channels");
  }
  if (h_prev.defined()) {
    const Shape expect{x_in.shape().n, unit.width, x_in.shape().h, x_in.shape().w};
    if (!(h_prev.shape() == expect)) {
      throw ConfigError("recurrent step: state " + h_prev.shape().str() + " expected " +
                        expect.str());
    }
  }
}

}  // namespace detail

/// tanh(W * x + U * h + b). An undefined `h_prev` stands for the zero state.
template <typename T>
Tensor<T> convrnn_step(const Tensor<T>& x_in, const Tensor<T>& h_prev,
                       const RecurrentUnit<T>& unit) {
  detail::check_step_shapes(x_in, h_prev, unit);
  auto pre = conv2d(x_in, unit.input_gates);
  if (h_prev.defined()) pre = add(pre, conv2d(h_prev, unit.state_gates));
  return tanh(pre);
}

/// z = sig(Wz*x + Uz*h + bz), r = sig(Wr*x + Ur*h + br),
/// n = tanh(Wn*x + Un*(r . h) + bn), h' = (1 - z) . h + z . n.
/// An undefined `h_prev` stands for the zero state, giving h' = z . n.
template <typename T>
Tensor<T> convgru_step(const Tensor<T>& x_in, const Tensor<T>& h_prev,
                       const RecurrentUnit<T>& unit) {
  if (unit.kind != UnitKind::kGru) throw ConfigError("convgru_step: unit is not a ConvGRU");
  detail::check_step_shapes(x_in, h_prev, unit);
  const int w = unit.width;
  auto wx = conv2d(x_in, unit.input_gates);
  auto wz = slice_channels(wx, 0, w);
  auto wr = slice_channels(wx, w, w);
  auto wn = slice_channels(wx, 2 * w, w);
  if (!h_prev.defined()) {
    return mul(sigmoid(wz), tanh(wn));
  }
  auto uh = conv2d(h_prev, unit.state_gates);
  auto z = sigmoid(add(wz, slice_channels(uh, 0, w)));
  auto r = sigmoid(add(wr, slice_channels(uh, w, w)));
  auto n = tanh(add(wn, conv2d(mul(r, h_prev), unit.state_candidate)));
  return add(mul(one_minus(z), h_prev), mul(z, n));
}

/// Four-gate ConvLSTM: i, f, o = sig(.), g = tanh(.), c' = f.c + i.g,
/// h' = o . tanh(c'). Undefined state tensors stand for zeros.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> convlstm_step(const Tensor<T>& x_in, const Tensor<T>& h_prev,
                                              const Tensor<T>& c_prev,
                                              const RecurrentUnit<T>& unit) {
  if (unit.kind != UnitKind::kLstm) throw ConfigError("convlstm_step: unit is not a ConvLSTM");
  detail::check_step_shapes(x_in, h_prev, unit);
  if (c_prev.defined() && h_prev.defined() && !(c_prev.shape() == h_prev.shape())) {
    throw ConfigError("convlstm_step: cell " + c_prev.shape().str() + " vs hidden " +
                      h_prev.shape().str());
  }
  const int w = unit.width;
  auto pre = conv2d(x_in, unit.input_gates);
  if (h_prev.defined()) pre = add(pre, conv2d(h_prev, unit.state_gates));
  auto i = sigmoid(slice_channels(pre, 0, w));
  auto f = sigmoid(slice_channels(pre, w, w));
  auto o = sigmoid(slice_channels(pre, 2 * w, w));
  auto g = tanh(slice_channels(pre, 3 * w, w));
  auto c = mul(i, g);
  if (c_prev.defined()) c = add(mul(f, c_prev), c);
  auto h = mul(o, tanh(c));
  return {h, c};
}

// ---------------------------------------------------------------------------
// Weight counts (biases excluded)

template <typename T>
std::size_t weight_param_count(const ConvKernel<T>& conv) {
  return conv.weight_count();
}

template <typename T>
std::size_t weight_param_count(const RecurrentUnit<T>& unit) {
  return unit.weight_count();
}

}  // namespace rescan
