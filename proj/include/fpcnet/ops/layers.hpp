#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fpcnet/ops/conv.hpp"
#include "fpcnet/tensor.hpp"

namespace fpcnet::ops {

namespace detail {

inline void require_rank4(const Shape& s, const char* op) {
  if (s.rank() != 4) throw ShapeError(std::string(op) + ": expected rank-4 tensor, got " + s.str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2.

template <class T>
struct PoolResult {
  Tensor<T> output;
  // Flat index into the input for every output element.
  std::vector<std::size_t> argmax;
};

// Ties resolve to the first element in row-major window order.
template <class T>
PoolResult<T> maxpool2x2(const Tensor<T>& x) {
  detail::require_rank4(x.shape(), "maxpool2x2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2)
    throw ShapeError("maxpool2x2: spatial extents must be even, got " + x.shape().str());
  const std::size_t oh = h / 2, ow = w / 2;
  PoolResult<T> r{Tensor<T>(Shape{n, c, oh, ow}), std::vector<std::size_t>(n * c * oh * ow)};
  std::size_t o = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j, ++o) {
        std::size_t best = base + 2 * i * w + 2 * j;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t q : cand)
          if (x[q] > x[best]) best = q;
        r.output[o] = x[best];
        r.argmax[o] = best;
      }
  }
  return r;
}

template <class T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& grad_out, std::span<const std::size_t> argmax,
                              const Shape& input_shape) {
  if (grad_out.numel() != argmax.size())
    throw ShapeError("maxpool2x2_backward: gradient does not match recorded indices");
  Tensor<T> gx(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += grad_out[o];
  return gx;
}

// ---------------------------------------------------------------------------
// Global average pooling and its spatial broadcast inverse.

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank4(x.shape(), "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{n, c, 1, 1});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.ptr() + p * hw;
    T s = T(0);
    for (std::size_t k = 0; k < hw; ++k) s += src[k];
    y[p] = s / static_cast<T>(hw);
  }
  return y;
}

template <class T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape) {
  const std::size_t hw = input_shape[2] * input_shape[3];
  Tensor<T> gx(input_shape);
  for (std::size_t p = 0; p < grad_out.numel(); ++p) {
    const T g = grad_out[p] / static_cast<T>(hw);
    T* dst = gx.ptr() + p * hw;
    for (std::size_t k = 0; k < hw; ++k) dst[k] = g;
  }
  return gx;
}

// Nearest-neighbour upsampling of a [N,C,1,1] map to [N,C,h,w].
template <class T>
Tensor<T> broadcast_spatial(const Tensor<T>& x, std::size_t h, std::size_t w) {
  detail::require_rank4(x.shape(), "broadcast_spatial");
  if (x.dim(2) != 1 || x.dim(3) != 1)
    throw ShapeError("broadcast_spatial: expected 1x1 spatial input, got " + x.shape().str());
  Tensor<T> y(Shape{x.dim(0), x.dim(1), h, w});
  for (std::size_t p = 0; p < x.numel(); ++p) {
    T* dst = y.ptr() + p * h * w;
    std::fill(dst, dst + h * w, x[p]);
  }
  return y;
}

template <class T>
Tensor<T> broadcast_spatial_backward(const Tensor<T>& grad_out) {
  const std::size_t n = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t hw = grad_out.dim(2) * grad_out.dim(3);
  Tensor<T> gx(Shape{n, c, 1, 1});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = grad_out.ptr() + p * hw;
    T s = T(0);
    for (std::size_t k = 0; k < hw; ++k) s += src[k];
    gx[p] = s;
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities.

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& x) {
  Tensor<T> gx(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) gx[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return gx;
}

// Clamped to the representable open interval (0,1): saturated inputs would
// otherwise round to exactly 0 or 1.
template <class T>
T sigmoid(T v) {
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  // Split by sign so exp never overflows.
  if (v >= T(0)) return std::min(hi, T(1) / (T(1) + std::exp(-v)));
  const T e = std::exp(v);
  return std::max(lo, e / (T(1) + e));
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

// Takes the forward output y, since dsigma/dx = y(1-y).
template <class T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_out, const Tensor<T>& y) {
  Tensor<T> gx(y.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) gx[i] = grad_out[i] * y[i] * (T(1) - y[i]);
  return gx;
}

// ---------------------------------------------------------------------------
// Fully connected: y[n,o] = b[o] + sum_i w[o,i] x[n,i].

namespace detail {

inline void check_fc(const Shape& x, const Shape& w, const Shape* b) {
  if (x.rank() != 2 || w.rank() != 2)
    throw ShapeError("fully_connected: expected x [N,Cin] and weight [Cout,Cin]");
  if (x[1] != w[1])
    throw ShapeError("fully_connected: input width " + std::to_string(x[1]) +
                     " does not match weight " + w.str());
  if (b && !(*b == Shape{w[0]}))
    throw ShapeError("fully_connected: bias " + b->str() + " does not match weight " + w.str());
}

}  // namespace detail

template <class T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::check_fc(x.shape(), weight.shape(), &bias.shape());
  const std::size_t n = x.dim(0), in = x.dim(1), out = weight.dim(0);
  Tensor<T> y(Shape{n, out});
  detail::ConstMapMat<T> xm(x.ptr(), n, in, Eigen::OuterStride<>(in));
  detail::ConstMapMat<T> wm(weight.ptr(), out, in, Eigen::OuterStride<>(in));
  detail::MapMat<T> ym(y.ptr(), n, out, Eigen::OuterStride<>(out));
  ym.noalias() = xm * wm.transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) y[i * out + o] += bias[o];
  return y;
}

template <class T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <class T>
LinearGrads<T> fully_connected_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                                        const Tensor<T>& weight) {
  detail::check_fc(x.shape(), weight.shape(), nullptr);
  const std::size_t n = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (!(grad_out.shape() == Shape{n, out}))
    throw ShapeError("fully_connected_backward: grad_out " + grad_out.shape().str());
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()), Tensor<T>(Shape{out})};
  detail::ConstMapMat<T> gym(grad_out.ptr(), n, out, Eigen::OuterStride<>(out));
  detail::ConstMapMat<T> xm(x.ptr(), n, in, Eigen::OuterStride<>(in));
  detail::ConstMapMat<T> wm(weight.ptr(), out, in, Eigen::OuterStride<>(in));
  detail::MapMat<T> gxm(g.input.ptr(), n, in, Eigen::OuterStride<>(in));
  detail::MapMat<T> gwm(g.weight.ptr(), out, in, Eigen::OuterStride<>(in));
  gxm.noalias() = gym * wm;
  gwm.noalias() = gym.transpose() * xm;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) g.bias[o] += grad_out[i * out + o];
  return g;
}

// ---------------------------------------------------------------------------
// Channel concatenation and its inverse.

template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = parts.front()->shape();
  detail::require_rank4(s0, "concat_channels");
  std::size_t channels = 0;
  for (const auto* p : parts) {
    const Shape& s = p->shape();
    if (s.rank() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: spatial mismatch " + s.str() + " vs " + s0.str());
    channels += s[1];
  }
  const std::size_t n = s0[0], hw = s0[2] * s0[3];
  Tensor<T> y(Shape{n, channels, s0[2], s0[3]});
  for (std::size_t i = 0; i < n; ++i) {
    T* dst = y.ptr() + i * channels * hw;
    for (const auto* p : parts) {
      const std::size_t block = p->dim(1) * hw;
      std::copy_n(p->ptr() + i * block, block, dst);
      dst += block;
    }
  }
  return y;
}

template <class T>
Tensor<T> concat_channels(std::initializer_list<const Tensor<T>*> parts) {
  return concat_channels<T>(std::span<const Tensor<T>* const>(parts.begin(), parts.size()));
}

// Channel range [first, first+count) of a rank-4 tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t first, std::size_t count) {
  detail::require_rank4(x.shape(), "slice_channels");
  if (count == 0 || first + count > x.dim(1)) throw ShapeError("slice_channels: range out of bounds");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{n, count, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.ptr() + (i * c + first) * hw, count * hw, y.ptr() + i * count * hw);
  return y;
}

// ---------------------------------------------------------------------------
// Per-sample channel scaling, y[n,c,h,w] = x[n,c,h,w] * s[n,c].

template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_rank4(x.shape(), "scale_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (s.numel() != n * c)
    throw ShapeError("scale_channels: weights " + s.shape().str() + " do not match " +
                     x.shape().str());
  Tensor<T> y(x.shape());
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.ptr() + p * hw;
    T* dst = y.ptr() + p * hw;
    for (std::size_t k = 0; k < hw; ++k) dst[k] = src[k] * s[p];
  }
  return y;
}

template <class T>
struct ScaleGrads {
  Tensor<T> input;
  Tensor<T> weights;
};

template <class T>
ScaleGrads<T> scale_channels_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                                      const Tensor<T>& s) {
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  ScaleGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(s.shape())};
  for (std::size_t p = 0; p < nc; ++p) {
    const T* gy = grad_out.ptr() + p * hw;
    const T* src = x.ptr() + p * hw;
    T* gx = g.input.ptr() + p * hw;
    T acc = T(0);
    for (std::size_t k = 0; k < hw; ++k) {
      gx[k] = gy[k] * s[p];
      acc += gy[k] * src[k];
    }
    g.weights[p] = acc;
  }
  return g;
}

// ---------------------------------------------------------------------------
// BCE + soft dice loss.

inline constexpr double kLossEpsilon = 1e-7;

template <class T>
struct LossTerms {
  T bce;
  T dice;
  T total() const { return bce + dice; }
};

namespace detail {

template <class T>
void check_loss_inputs(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.empty()) throw ShapeError("bce_dice_loss: empty tensor");
  if (!(pred.shape() == target.shape()))
    throw ShapeError("bce_dice_loss: prediction " + pred.shape().str() + " vs target " +
                     target.shape().str());
}

}  // namespace detail

// Mean negated log-likelihood over pixels plus 1 - 2TP/(2TP+FP+FN) with
// soft counts. Since 2TP+FP+FN = sum(p) + sum(t), the dice term is
// 1 - 2 sum(p t) / (sum(p) + sum(t)).
template <class T>
LossTerms<T> bce_dice_terms(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_loss_inputs(pred, target);
  const T eps = static_cast<T>(kLossEpsilon);
  T nll = T(0), tp = T(0), denom = T(0);
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T p = pred[i], t = target[i];
    const T pc = std::clamp(p, eps, T(1) - eps);
    nll -= t * std::log(pc) + (T(1) - t) * std::log(T(1) - pc);
    tp += p * t;
    denom += p + t;
  }
  const T dice = denom > T(0) ? T(1) - T(2) * tp / denom : T(0);
  return {nll / static_cast<T>(pred.numel()), dice};
}

template <class T>
T bce_dice_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  return bce_dice_terms(pred, target).total();
}

template <class T>
Tensor<T> bce_dice_loss_backward(const Tensor<T>& pred, const Tensor<T>& target, T grad_out = T(1)) {
  detail::check_loss_inputs(pred, target);
  const T eps = static_cast<T>(kLossEpsilon);
  const T inv_n = T(1) / static_cast<T>(pred.numel());
  T tp = T(0), denom = T(0);
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    tp += pred[i] * target[i];
    denom += pred[i] + target[i];
  }
  Tensor<T> g(pred.shape());
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T p = pred[i], t = target[i];
    T d = T(0);
    if (p > eps && p < T(1) - eps) d = -inv_n * (t / p - (T(1) - t) / (T(1) - p));
    if (denom > T(0)) d -= T(2) * t / denom - T(2) * tp / (denom * denom);
    g[i] = d * grad_out;
  }
  return g;
}

}  // namespace fpcnet::ops
