#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "fpcnet/tensor.hpp"

namespace fpcnet::ops {

// Geometry of a 2-D convolution; the kernel extent comes from the weight.
struct ConvSpec {
  std::size_t dilation = 1;
  std::size_t padding = 0;
  std::size_t stride = 1;

  // Padding that keeps H'=H for an odd kernel at stride 1.
  static ConvSpec same(std::size_t kernel, std::size_t dilation = 1) {
    return {dilation, dilation * (kernel - 1) / 2, 1};
  }
};

// Span of a dilated kernel: k + (k-1)(r-1).
constexpr std::size_t effective_kernel_size(std::size_t k, std::size_t dilation) {
  return k + (k - 1) * (dilation - 1);
}

inline std::size_t conv_output_extent(std::size_t in, std::size_t k, const ConvSpec& s) {
  const std::size_t keff = effective_kernel_size(k, s.dilation);
  if (s.dilation == 0 || s.stride == 0) throw ShapeError("conv2d: dilation and stride must be >= 1");
  if (in + 2 * s.padding < keff)
    throw ShapeError("conv2d: effective kernel " + std::to_string(keff) +
                     " larger than padded input " + std::to_string(in + 2 * s.padding));
  return (in + 2 * s.padding - keff) / s.stride + 1;
}

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

// Column buffers are capped so full-resolution layers do not allocate
// hundreds of megabytes at once.
inline constexpr std::size_t kColumnBudget = std::size_t(1) << 22;

struct ConvGeometry {
  std::size_t n, in_c, h, w;
  std::size_t out_c, k;
  std::size_t oh, ow;
  ConvSpec spec;

  std::size_t patch() const { return in_c * k * k; }
  bool is_pointwise() const {
    return k == 1 && spec.stride == 1 && spec.padding == 0;
  }
  std::size_t rows_per_chunk() const {
    const std::size_t per_row = patch() * ow;
    return std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_row, 1), 1, oh);
  }
};

template <class T>
ConvGeometry geometry(const Shape& x, const Shape& w, const ConvSpec& spec) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: expected rank-4 input and weight");
  if (w[2] != w[3]) throw ShapeError("conv2d: only square kernels are supported");
  if (x[1] != w[1])
    throw ShapeError("conv2d: input has " + std::to_string(x[1]) + " channels, weight expects " +
                     std::to_string(w[1]));
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], 0, 0, spec};
  g.oh = conv_output_extent(g.h, g.k, spec);
  g.ow = conv_output_extent(g.w, g.k, spec);
  return g;
}

// Lower output rows [oh0, oh1) of image n into a (in_c*k*k) x (rows*ow) patch matrix.
template <class T>
void im2col(const T* x, const ConvGeometry& g, std::size_t oh0, std::size_t oh1, T* col) {
  const std::size_t L = (oh1 - oh0) * g.ow;
  const auto pad = static_cast<std::ptrdiff_t>(g.spec.padding);
  const auto r = static_cast<std::ptrdiff_t>(g.spec.dilation);
  const auto s = static_cast<std::ptrdiff_t>(g.spec.stride);
  const auto H = static_cast<std::ptrdiff_t>(g.h), W = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t ci = 0; ci < g.in_c; ++ci) {
    const T* plane = x + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((ci * g.k + ki) * g.k + kj) * L;
        for (std::size_t oh = oh0; oh < oh1; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * s - pad + static_cast<std::ptrdiff_t>(ki) * r;
          T* dst = row + (oh - oh0) * g.ow;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = plane + ih * W;
          for (std::size_t ow = 0; ow < g.ow; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * s - pad + static_cast<std::ptrdiff_t>(kj) * r;
            dst[ow] = (iw < 0 || iw >= W) ? T(0) : src[iw];
          }
        }
      }
  }
}

// Adjoint of im2col: scatter-add a patch matrix back into image n.
template <class T>
void col2im(const T* col, const ConvGeometry& g, std::size_t oh0, std::size_t oh1, T* x) {
  const std::size_t L = (oh1 - oh0) * g.ow;
  const auto pad = static_cast<std::ptrdiff_t>(g.spec.padding);
  const auto r = static_cast<std::ptrdiff_t>(g.spec.dilation);
  const auto s = static_cast<std::ptrdiff_t>(g.spec.stride);
  const auto H = static_cast<std::ptrdiff_t>(g.h), W = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t ci = 0; ci < g.in_c; ++ci) {
    T* plane = x + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((ci * g.k + ki) * g.k + kj) * L;
        for (std::size_t oh = oh0; oh < oh1; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * s - pad + static_cast<std::ptrdiff_t>(ki) * r;
          if (ih < 0 || ih >= H) continue;
          const T* src = row + (oh - oh0) * g.ow;
          T* dst = plane + ih * W;
          for (std::size_t ow = 0; ow < g.ow; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * s - pad + static_cast<std::ptrdiff_t>(kj) * r;
            if (iw >= 0 && iw < W) dst[iw] += src[ow];
          }
        }
      }
  }
}

// y = w * x without bias, via patch-matrix lowering.
template <class T>
Tensor<T> conv_gemm_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g) {
  Tensor<T> y(Shape{g.n, g.out_c, g.oh, g.ow});
  const std::size_t plane_out = g.oh * g.ow;
  ConstMapMat<T> wm(w.ptr(), g.out_c, g.patch(), Eigen::OuterStride<>(g.patch()));
  std::vector<T> col;
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* xn = x.ptr() + n * g.in_c * g.h * g.w;
    T* yn = y.ptr() + n * g.out_c * plane_out;
    if (g.is_pointwise()) {
      ConstMapMat<T> xm(xn, g.in_c, plane_out, Eigen::OuterStride<>(plane_out));
      MapMat<T> ym(yn, g.out_c, plane_out, Eigen::OuterStride<>(plane_out));
      ym.noalias() = wm * xm;
      continue;
    }
    const std::size_t step = g.rows_per_chunk();
    for (std::size_t oh0 = 0; oh0 < g.oh; oh0 += step) {
      const std::size_t oh1 = std::min(g.oh, oh0 + step);
      const std::size_t L = (oh1 - oh0) * g.ow;
      col.resize(g.patch() * L);
      im2col(xn, g, oh0, oh1, col.data());
      ConstMapMat<T> cm(col.data(), g.patch(), L, Eigen::OuterStride<>(L));
      MapMat<T> ym(yn + oh0 * g.ow, g.out_c, L, Eigen::OuterStride<>(plane_out));
      ym.noalias() = wm * cm;
    }
  }
  return y;
}

// grad_x = w^T * grad_y, scattered back through col2im.
template <class T>
Tensor<T> conv_gemm_backward_data(const Tensor<T>& gy, const Tensor<T>& w, const ConvGeometry& g) {
  Tensor<T> gx(Shape{g.n, g.in_c, g.h, g.w});
  const std::size_t plane_out = g.oh * g.ow;
  ConstMapMat<T> wm(w.ptr(), g.out_c, g.patch(), Eigen::OuterStride<>(g.patch()));
  std::vector<T> col;
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* gyn = gy.ptr() + n * g.out_c * plane_out;
    T* gxn = gx.ptr() + n * g.in_c * g.h * g.w;
    if (g.is_pointwise()) {
      ConstMapMat<T> gym(gyn, g.out_c, plane_out, Eigen::OuterStride<>(plane_out));
      MapMat<T> gxm(gxn, g.in_c, plane_out, Eigen::OuterStride<>(plane_out));
      gxm.noalias() = wm.transpose() * gym;
      continue;
    }
    const std::size_t step = g.rows_per_chunk();
    for (std::size_t oh0 = 0; oh0 < g.oh; oh0 += step) {
      const std::size_t oh1 = std::min(g.oh, oh0 + step);
      const std::size_t L = (oh1 - oh0) * g.ow;
      col.resize(g.patch() * L);
      ConstMapMat<T> gym(gyn + oh0 * g.ow, g.out_c, L, Eigen::OuterStride<>(plane_out));
      MapMat<T> cm(col.data(), g.patch(), L, Eigen::OuterStride<>(L));
      cm.noalias() = wm.transpose() * gym;
      col2im(col.data(), g, oh0, oh1, gxn);
    }
  }
  return gx;
}

// grad_w = sum_n grad_y * patches^T.
template <class T>
Tensor<T> conv_gemm_backward_weight(const Tensor<T>& gy, const Tensor<T>& x, const ConvGeometry& g) {
  Tensor<T> gw(Shape{g.out_c, g.in_c, g.k, g.k});
  const std::size_t plane_out = g.oh * g.ow;
  MapMat<T> gwm(gw.ptr(), g.out_c, g.patch(), Eigen::OuterStride<>(g.patch()));
  std::vector<T> col;
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* gyn = gy.ptr() + n * g.out_c * plane_out;
    const T* xn = x.ptr() + n * g.in_c * g.h * g.w;
    if (g.is_pointwise()) {
      ConstMapMat<T> gym(gyn, g.out_c, plane_out, Eigen::OuterStride<>(plane_out));
      ConstMapMat<T> xm(xn, g.in_c, plane_out, Eigen::OuterStride<>(plane_out));
      gwm.noalias() += gym * xm.transpose();
      continue;
    }
    const std::size_t step = g.rows_per_chunk();
    for (std::size_t oh0 = 0; oh0 < g.oh; oh0 += step) {
      const std::size_t oh1 = std::min(g.oh, oh0 + step);
      const std::size_t L = (oh1 - oh0) * g.ow;
      col.resize(g.patch() * L);
      im2col(xn, g, oh0, oh1, col.data());
      ConstMapMat<T> cm(col.data(), g.patch(), L, Eigen::OuterStride<>(L));
      ConstMapMat<T> gym(gyn + oh0 * g.ow, g.out_c, L, Eigen::OuterStride<>(plane_out));
      gwm.noalias() += gym * cm.transpose();
    }
  }
  return gw;
}

template <class T>
void add_channel_bias(Tensor<T>& y, const Tensor<T>& bias) {
  const std::size_t n = y.dim(0), c = y.dim(1), hw = y.dim(2) * y.dim(3);
  if (bias.numel() != c)
    throw ShapeError("bias has " + std::to_string(bias.numel()) + " entries for " +
                     std::to_string(c) + " channels");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      T* p = y.ptr() + (i * c + j) * hw;
      const T b = bias[j];
      for (std::size_t k = 0; k < hw; ++k) p[k] += b;
    }
}

template <class T>
Tensor<T> channel_sums(const Tensor<T>& g) {
  const std::size_t n = g.dim(0), c = g.dim(1), hw = g.dim(2) * g.dim(3);
  Tensor<T> out(Shape{c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const T* p = g.ptr() + (i * c + j) * hw;
      T s = T(0);
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      out[j] += s;
    }
  return out;
}

}  // namespace detail

// Dilated 2-D convolution, y[n,o,i,j] = b[o] + sum_{c,u,v} x[n,c,i*s-p+u*r, j*s-p+v*r] w[o,c,u,v].
// weight: [outC, inC, k, k]; bias: [outC] (optional).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                 const ConvSpec& spec) {
  const auto g = detail::geometry<T>(x.shape(), weight.shape(), spec);
  Tensor<T> y = detail::conv_gemm_forward(x, weight, g);
  if (bias) detail::add_channel_bias(y, *bias);
  debug_check_finite(y, "conv2d");
  return y;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  return conv2d(x, weight, &bias, spec);
}

// Direct-summation path. Accumulates bias first, then channels, kernel rows, kernel columns.
template <class T>
Tensor<T> conv2d_direct(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                        const ConvSpec& spec) {
  const auto g = detail::geometry<T>(x.shape(), weight.shape(), spec);
  Tensor<T> y(Shape{g.n, g.out_c, g.oh, g.ow});
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.out_c; ++o)
      for (std::size_t i = 0; i < g.oh; ++i)
        for (std::size_t j = 0; j < g.ow; ++j) {
          T acc = bias ? (*bias)[o] : T(0);
          for (std::size_t c = 0; c < g.in_c; ++c)
            for (std::size_t u = 0; u < g.k; ++u) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(i * spec.stride + u * spec.dilation) - pad;
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
              for (std::size_t v = 0; v < g.k; ++v) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(j * spec.stride + v * spec.dilation) - pad;
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) continue;
                acc += x.at(n, c, ih, iw) * weight.at(o, c, u, v);
              }
            }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

template <class T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                             const Tensor<T>& weight, const ConvSpec& spec) {
  const auto g = detail::geometry<T>(x.shape(), weight.shape(), spec);
  if (!(grad_out.shape() == Shape{g.n, g.out_c, g.oh, g.ow}))
    throw ShapeError("conv2d_backward: grad_out " + grad_out.shape().str() +
                     " does not match forward output");
  return {detail::conv_gemm_backward_data(grad_out, weight, g),
          detail::conv_gemm_backward_weight(grad_out, x, g), detail::channel_sums(grad_out)};
}

// Transposed convolution, the adjoint of a stride-s, unpadded conv2d.
// weight: [inC, outC, k, k]; output extents (H-1)*s + k.
struct TransposedConvSpec {
  std::size_t stride = 2;
};

namespace detail {

template <class T>
ConvGeometry transposed_geometry(const Shape& x, const Shape& w, const TransposedConvSpec& s) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("transposed_conv2d: expected rank-4 input and weight");
  if (x[1] != w[0])
    throw ShapeError("transposed_conv2d: input has " + std::to_string(x[1]) +
                     " channels, weight expects " + std::to_string(w[0]));
  if (w[2] != w[3]) throw ShapeError("transposed_conv2d: only square kernels are supported");
  // The equivalent forward conv maps the transposed output back to x.
  ConvGeometry g{};
  g.n = x[0];
  g.in_c = w[1];
  g.out_c = w[0];
  g.k = w[2];
  g.spec = ConvSpec{1, 0, s.stride};
  g.oh = x[2];
  g.ow = x[3];
  g.h = (x[2] - 1) * s.stride + g.k;
  g.w = (x[3] - 1) * s.stride + g.k;
  return g;
}

}  // namespace detail

template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                            const TransposedConvSpec& spec = {}) {
  const auto g = detail::transposed_geometry<T>(x.shape(), weight.shape(), spec);
  Tensor<T> y = detail::conv_gemm_backward_data(x, weight, g);
  if (bias) detail::add_channel_bias(y, *bias);
  debug_check_finite(y, "transposed_conv2d");
  return y;
}

template <class T>
ConvGrads<T> transposed_conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                                        const Tensor<T>& weight,
                                        const TransposedConvSpec& spec = {}) {
  const auto g = detail::transposed_geometry<T>(x.shape(), weight.shape(), spec);
  if (!(grad_out.shape() == Shape{g.n, g.in_c, g.h, g.w}))
    throw ShapeError("transposed_conv2d_backward: grad_out " + grad_out.shape().str() +
                     " does not match forward output");
  return {detail::conv_gemm_forward(grad_out, weight, g),
          detail::conv_gemm_backward_weight(x, grad_out, g), detail::channel_sums(grad_out)};
}

}  // namespace fpcnet::ops
