#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <string>
#include <type_traits>
#include <vector>

#include "rescan/tensor.hpp"

namespace rescan {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw ConfigError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// Unfolds one image (C, H, W) into columns (C*k*k, H*W) for a same-padded
// dilated k x k kernel.
template <typename T>
void im2col(const T* image, int channels, int height, int width, int k, int dilation,
            T* cols) {
  const int half = k / 2;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    const T* src = image + c * plane;
    for (int ky = 0; ky < k; ++ky) {
      const int dy = (ky - half) * dilation;
      for (int kx = 0; kx < k; ++kx) {
        const int dx = (kx - half) * dilation;
        T* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * plane;
        const int x_lo = std::max(0, -dx);
        const int x_hi = std::min(width, width - dx);
        for (int y = 0; y < height; ++y) {
          T* dst = row + static_cast<std::size_t>(y) * width;
          const int sy = y + dy;
          if (sy < 0 || sy >= height || x_lo >= x_hi) {
            std::fill(dst, dst + width, T(0));
            continue;
          }
          std::fill(dst, dst + x_lo, T(0));
          std::memcpy(dst + x_lo, src + static_cast<std::size_t>(sy) * width + x_lo + dx,
                      sizeof(T) * (x_hi - x_lo));
          std::fill(dst + x_hi, dst + width, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the image.
template <typename T>
void col2im_add(const T* cols, int channels, int height, int width, int k, int dilation,
                T* image) {
  const int half = k / 2;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    T* dst_plane = image + c * plane;
    for (int ky = 0; ky < k; ++ky) {
      const int dy = (ky - half) * dilation;
      for (int kx = 0; kx < k; ++kx) {
        const int dx = (kx - half) * dilation;
        const T* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * plane;
        const int x_lo = std::max(0, -dx);
        const int x_hi = std::min(width, width - dx);
        for (int y = 0; y < height; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= height) continue;
          const T* src = row + static_cast<std::size_t>(y) * width;
          T* dst = dst_plane + static_cast<std::size_t>(sy) * width + dx;
          for (int x = x_lo; x < x_hi; ++x) dst[x] += src[x];
        }
      }
    }
  }
}

}  // namespace detail

/// Same-padded dilated 2-D cross-correlation.
///
/// `weight` is (out, in, k, k) with odd k; `bias` is (1, out, 1, 1) or
/// undefined. Padding is dilation * (k - 1) / 2 so H and W are preserved.
/// Lowered to im2col + GEMM per batch item; the column buffer is rebuilt in
/// the backward pass rather than kept alive.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int dilation) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (ws.h != ws.w || ws.h % 2 == 0) {
    throw ConfigError("conv2d: kernel must be square with odd size, got " + ws.str());
  }
  if (dilation < 1) {
    throw ConfigError("conv2d: dilation must be >= 1, got " + std::to_string(dilation));
  }
  if (is.c != ws.c) {
    throw ConfigError("conv2d: input " + is.str() + " does not match kernel " + ws.str());
  }
  if (bias.defined() && !(bias.shape() == Shape{1, ws.n, 1, 1})) {
    throw ConfigError("conv2d: bias " + bias.shape().str() + " does not match kernel " +
                      ws.str());
  }

  const int k = ws.h;
  const int cout = ws.n;
  const int kdim = ws.c * k * k;
  const std::size_t hw = is.plane();
  const bool pointwise = (k == 1);

  Tensor<T> out = Tensor<T>::make_result(Shape{is.n, cout, is.h, is.w}, "conv2d",
                                         {&input, &weight, &bias});
  detail::ConstMatMap<T> wmat(weight.data().data(), cout, kdim);
  detail::Buffer<T> cols(pointwise ? 0 : static_cast<std::size_t>(kdim) * hw);
  for (int n = 0; n < is.n; ++n) {
    const T* src = input.data().data() + n * static_cast<std::size_t>(is.c) * hw;
    const T* col_ptr = src;
    if (!pointwise) {
      detail::im2col(src, is.c, is.h, is.w, k, dilation, cols.data());
      col_ptr = cols.data();
    }
    detail::ConstMatMap<T> cmat(col_ptr, kdim, hw);
    detail::MatMap<T> omat(out.data().data() + n * static_cast<std::size_t>(cout) * hw, cout,
                           hw);
    omat.noalias() = wmat * cmat;
    if (bias.defined()) {
      for (int o = 0; o < cout; ++o) omat.row(o).array() += bias.data()[o];
    }
  }

  if (out.requires_grad()) {
    auto* on = out.node();
    auto* in = input.node();
    auto* wn = weight.node();
    auto* bn = bias.defined() ? bias.node() : nullptr;
    const Shape in_shape = is;
    out.node()->backward = [on, in, wn, bn, in_shape, cout, kdim, k, dilation, hw,
                            pointwise]() {
      detail::ConstMatMap<T> wmat(wn->data.data(), cout, kdim);
      detail::Buffer<T> cols(pointwise ? 0 : static_cast<std::size_t>(kdim) * hw);
      detail::Buffer<T> dcols(static_cast<std::size_t>(kdim) * hw);
      for (int n = 0; n < in_shape.n; ++n) {
        detail::ConstMatMap<T> gmat(on->grad.data() + n * static_cast<std::size_t>(cout) * hw,
                                    cout, hw);
        if (bn != nullptr && bn->requires_grad) {
          auto& bg = bn->ensure_grad();
          for (int o = 0; o < cout; ++o) bg[o] += gmat.row(o).sum();
        }
        const T* src = in->data.data() + n * static_cast<std::size_t>(in_shape.c) * hw;
        if (wn->requires_grad) {
          const T* col_ptr = src;
          if (!pointwise) {
            detail::im2col(src, in_shape.c, in_shape.h, in_shape.w, k, dilation, cols.data());
            col_ptr = cols.data();
          }
          detail::ConstMatMap<T> cmat(col_ptr, kdim, hw);
          detail::MatMap<T> wg(wn->ensure_grad().data(), cout, kdim);
          wg.noalias() += gmat * cmat.transpose();
        }
        if (in->requires_grad) {
          T* dst = in->ensure_grad().data() + n * static_cast<std::size_t>(in_shape.c) * hw;
          if (pointwise) {
            detail::MatMap<T> dmat(dst, in_shape.c, hw);
            dmat.noalias() += wmat.transpose() * gmat;
          } else {
            detail::MatMap<T> dmat(dcols.data(), kdim, hw);
            dmat.noalias() = wmat.transpose() * gmat;
            detail::col2im_add(dcols.data(), in_shape.c, in_shape.h, in_shape.w, k, dilation,
                               dst);
          }
        }
      }
    };
  }
  return out;
}

namespace detail {

// Builds an elementwise unary op from a forward map and a derivative written
// in terms of (input, output).
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor<T> out = Tensor<T>::make_result(x.shape(), name, {&x});
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = fwd(xs[i]);
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    on->backward = [on, xn, deriv]() {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += on->grad[i] * deriv(xn->data[i], on->data[i]);
      }
    };
  }
  return out;
}

}  // namespace detail

/// max(x, slope * x) for slope in (0, 1).
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  if (!(slope > T(0) && slope < T(1))) {
    throw ConfigError("leaky_relu: slope must lie in (0, 1)");
  }
  return detail::unary(
      x, "leaky_relu", [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

namespace detail {

template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

// Runs `bulk` over whole buffers (vectorised forward), derivative as in unary().
template <typename T, typename Bulk, typename Deriv>
Tensor<T> unary_bulk(const Tensor<T>& x, const char* name, Bulk bulk, Deriv deriv) {
  Tensor<T> out = Tensor<T>::make_result(x.shape(), name, {&x});
  const auto n = static_cast<Eigen::Index>(x.numel());
  ArrayMap<T> dst(out.data().data(), n);
  bulk(ConstArrayMap<T>(x.data().data(), n), dst);
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    on->backward = [on, xn, deriv]() {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += on->grad[i] * deriv(xn->data[i], on->data[i]);
      }
    };
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  if constexpr (std::is_same_v<T, float>) {
    return detail::unary_bulk(
        x, "sigmoid", [](const auto& in, auto& out) { out = in.logistic(); },
        [](T, T y) { return y * (T(1) - y); });
  } else {
    return detail::unary(
        x, "sigmoid", [](T v) { return stable_sigmoid(v); },
        [](T, T y) { return y * (T(1) - y); });
  }
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  if constexpr (std::is_same_v<T, float>) {
    return detail::unary_bulk(
        x, "tanh", [](const auto& in, auto& out) { out = in.tanh(); },
        [](T, T y) { return T(1) - y * y; });
  } else {
    return detail::unary(
        x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
  }
}

// 1 - x, used by the GRU update gate.
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
  return detail::unary(
      x, "one_minus", [](T v) { return T(1) - v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = Tensor<T>::make_result(a.shape(), "add", {&a, &b});
  auto as = a.data();
  auto bs = b.data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] + bs[i];
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* an = a.node();
    auto* bn = b.node();
    on->backward = [on, an, bn]() {
      for (auto* p : {an, bn}) {
        if (!p->requires_grad) continue;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = Tensor<T>::make_result(a.shape(), "sub", {&a, &b});
  auto as = a.data();
  auto bs = b.data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] - bs[i];
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* an = a.node();
    auto* bn = b.node();
    on->backward = [on, an, bn]() {
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
      }
    };
  }
  return out;
}

/// Elementwise product. `b` may also be per-channel (N, C, 1, 1), in which
/// case it scales every spatial position of the matching channel.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const bool per_channel = !(as == bs) && bs.n == as.n && bs.c == as.c && bs.h == 1 &&
                           bs.w == 1;
  if (!(as == bs) && !per_channel) {
    throw ConfigError("mul: incompatible shapes " + as.str() + " and " + bs.str());
  }
  Tensor<T> out = Tensor<T>::make_result(as, "mul", {&a, &b});
  const std::size_t plane = per_channel ? as.plane() : out.numel();
  const std::size_t groups = per_channel ? bs.numel() : 1;
  {
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* od = out.data().data();
    if (per_channel) {
      for (std::size_t m = 0; m < groups; ++m) {
        const T scale = bd[m];
        for (std::size_t i = m * plane; i < (m + 1) * plane; ++i) od[i] = ad[i] * scale;
      }
    } else {
      for (std::size_t i = 0; i < plane; ++i) od[i] = ad[i] * bd[i];
    }
  }
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* an = a.node();
    auto* bn = b.node();
    on->backward = [on, an, bn, plane, groups, per_channel]() {
      const T* g = on->grad.data();
      if (an->requires_grad) {
        T* ga = an->ensure_grad().data();
        const T* bd = bn->data.data();
        if (per_channel) {
          for (std::size_t m = 0; m < groups; ++m) {
            for (std::size_t i = m * plane; i < (m + 1) * plane; ++i) ga[i] += g[i] * bd[m];
          }
        } else {
          for (std::size_t i = 0; i < plane; ++i) ga[i] += g[i] * bd[i];
        }
      }
      if (bn->requires_grad) {
        T* gb = bn->ensure_grad().data();
        const T* ad = an->data.data();
        if (per_channel) {
          for (std::size_t m = 0; m < groups; ++m) {
            T acc = T(0);
            for (std::size_t i = m * plane; i < (m + 1) * plane; ++i) acc += g[i] * ad[i];
            gb[m] += acc;
          }
        } else {
          for (std::size_t i = 0; i < plane; ++i) gb[i] += g[i] * ad[i];
        }
      }
    };
  }
  return out;
}

/// Spatial mean per (n, c), producing (N, C, 1, 1).
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.h < 1 || s.w < 1) throw ConfigError("global_avg_pool: empty spatial extent");
  Tensor<T> out = Tensor<T>::make_result(Shape{s.n, s.c, 1, 1}, "global_avg_pool", {&x});
  const std::size_t plane = s.plane();
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t m = 0; m < od.size(); ++m) {
    T acc = T(0);
    for (std::size_t i = 0; i < plane; ++i) acc += xd[m * plane + i];
    od[m] = acc / static_cast<T>(plane);
  }
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    on->backward = [on, xn, plane]() {
      auto& g = xn->ensure_grad();
      for (std::size_t m = 0; m < on->grad.size(); ++m) {
        const T share = on->grad[m] / static_cast<T>(plane);
        for (std::size_t i = 0; i < plane; ++i) g[m * plane + i] += share;
      }
    };
  }
  return out;
}

/// Channels [start, start + count) of x.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int start, int count) {
  const Shape& s = x.shape();
  if (start < 0 || count <= 0 || start + count > s.c) {
    throw ConfigError("slice_channels: range [" + std::to_string(start) + ", " +
                      std::to_string(start + count) + ") outside " + s.str());
  }
  Tensor<T> out = Tensor<T>::make_result(Shape{s.n, count, s.h, s.w}, "slice_channels", {&x});
  const std::size_t plane = s.plane();
  const std::size_t chunk = plane * count;
  for (int n = 0; n < s.n; ++n) {
    const T* src = x.data().data() + (static_cast<std::size_t>(n) * s.c + start) * plane;
    std::copy(src, src + chunk, out.data().data() + n * chunk);
  }
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    on->backward = [on, xn, s, start, chunk, plane]() {
      auto& g = xn->ensure_grad();
      for (int n = 0; n < s.n; ++n) {
        T* dst = g.data() + (static_cast<std::size_t>(n) * s.c + start) * plane;
        const T* src = on->grad.data() + n * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    };
  }
  return out;
}

/// Sum of all elements as a (1, 1, 1, 1) tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::make_result(Shape{1, 1, 1, 1}, "sum", {&x});
  T acc = T(0);
  for (T v : x.data()) acc += v;
  out.data()[0] = acc;
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* xn = x.node();
    on->backward = [on, xn]() {
      auto& g = xn->ensure_grad();
      for (auto& v : g) v += on->grad[0];
    };
  }
  return out;
}

/// Mean squared difference over every element.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred.shape(), target.shape(), "mse_loss");
  Tensor<T> out = Tensor<T>::make_result(Shape{1, 1, 1, 1}, "mse_loss", {&pred, &target});
  auto pd = pred.data();
  auto td = target.data();
  T acc = T(0);
  for (std::size_t i = 0; i < pd.size(); ++i) {
    const T d = pd[i] - td[i];
    acc += d * d;
  }
  const T count = static_cast<T>(pd.size());
  out.data()[0] = acc / count;
  if (out.requires_grad()) {
    auto* on = out.node();
    auto* pn = pred.node();
    auto* tn = target.node();
    on->backward = [on, pn, tn, count]() {
      const T scale = T(2) * on->grad[0] / count;
      if (pn->requires_grad) {
        auto& g = pn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * (pn->data[i] - tn->data[i]);
      }
      if (tn->requires_grad) {
        auto& g = tn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= scale * (pn->data[i] - tn->data[i]);
      }
    };
  }
  return out;
}

}  // namespace rescan
