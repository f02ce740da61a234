#pragma once

// Brute-force reference implementations. These deliberately avoid the
// library's kernels so they can check them.

#include <cstdint>
#include <vector>

#include "fpcnet/metrics.hpp"
#include "fpcnet/tensor.hpp"

namespace fpcnet::verify {

// Dilated convolution straight from y[i] = sum_k x[i + r k] w[k], applied on
// both axes of an explicitly zero-padded copy of the input.
template <class T>
Tensor<T> conv2d_oracle(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* b, std::size_t dilation,
                        std::size_t padding, std::size_t stride = 1) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  const std::size_t HP = H + 2 * padding, WP = W + 2 * padding;
  std::vector<T> padded(N * C * HP * WP, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          padded[((n * C + c) * HP + i + padding) * WP + j + padding] = x.at(n, c, i, j);
  const std::size_t span = K + (K - 1) * (dilation - 1);
  const std::size_t OH = (HP - span) / stride + 1, OW = (WP - span) / stride + 1;
  Tensor<T> y(Shape{N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j) {
          double acc = b ? static_cast<double>((*b)[o]) : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < K; ++u)
              for (std::size_t v = 0; v < K; ++v)
                acc += static_cast<double>(
                           padded[((n * C + c) * HP + i * stride + dilation * u) * WP + j * stride + dilation * v]) *
                       static_cast<double>(w.at(o, c, u, v));
          y.at(n, o, i, j) = static_cast<T>(acc);
        }
  return y;
}

// Standard (undilated, stride 1) convolution with the same accumulation order
// as the direct kernel: bias, then channel, kernel row, kernel column.
template <class T>
Tensor<T> standard_conv2d_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t padding) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  const std::size_t OH = H + 2 * padding - K + 1, OW = W + 2 * padding - K + 1;
  Tensor<T> y(Shape{N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j) {
          T acc = b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < K; ++u)
              for (std::size_t v = 0; v < K; ++v) {
                const long ih = static_cast<long>(i + u) - static_cast<long>(padding);
                const long iw = static_cast<long>(j + v) - static_cast<long>(padding);
                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) continue;
                acc += x.at(n, c, ih, iw) * w.at(o, c, u, v);
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

// Transposed 2x2 / stride-2 convolution as a scatter:
// y[:, o, 2i+a, 2j+b] += x[:, c, i, j] * w[c, o, a, b].
template <class T>
Tensor<T> transposed_conv2d_oracle(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* b) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(1), K = w.dim(2);
  Tensor<T> y(Shape{N, O, (H - 1) * 2 + K, (W - 1) * 2 + K});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t a = 0; a < K; ++a)
              for (std::size_t bb = 0; bb < K; ++bb) y.at(n, o, 2 * i + a, 2 * j + bb) += x.at(n, c, i, j) * w.at(c, o, a, bb);
  if (b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < y.dim(2); ++i)
          for (std::size_t j = 0; j < y.dim(3); ++j) y.at(n, o, i, j) += (*b)[o];
  return y;
}

// Double-loop affine map for [N,Cin] x [Cout,Cin].
template <class T>
Tensor<T> matmul_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t N = x.dim(0), I = x.dim(1), O = w.dim(0);
  Tensor<T> y(Shape{N, O});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < I; ++i) acc += static_cast<double>(x[n * I + i]) * static_cast<double>(w[o * I + i]);
      y[n * O + o] = static_cast<T>(acc);
    }
  return y;
}

template <class T>
Tensor<T> channel_sum_oracle(const Tensor<T>& x) {
  Tensor<T> y(Shape{x.dim(0), x.dim(1), 1, 1});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c) {
      double s = 0;
      for (std::size_t i = 0; i < x.dim(2); ++i)
        for (std::size_t j = 0; j < x.dim(3); ++j) s += x.at(n, c, i, j);
      y.at(n, c, 0, 0) = static_cast<T>(s);
    }
  return y;
}

// All-pairs tolerance matching, O(|pred| * |gt|), integer arithmetic.
inline EvalCounts evaluate_counts_bruteforce(const Mask& pred, const Mask& gt, long margin) {
  std::vector<std::pair<long, long>> p, g;
  for (std::size_t r = 0; r < pred.height; ++r)
    for (std::size_t c = 0; c < pred.width; ++c) {
      if (pred(r, c)) p.emplace_back(r, c);
      if (gt(r, c)) g.emplace_back(r, c);
    }
  auto within = [margin](std::pair<long, long> a, std::pair<long, long> b) {
    const long dr = a.first - b.first, dc = a.second - b.second;
    return dr * dr + dc * dc <= margin * margin;
  };
  EvalCounts out;
  for (const auto& a : p) {
    bool hit = false;
    for (const auto& b : g) hit = hit || within(a, b);
    (hit ? out.tp : out.fp)++;
  }
  for (const auto& b : g) {
    bool hit = false;
    for (const auto& a : p) hit = hit || within(a, b);
    (hit ? out.matched_gt : out.fn)++;
  }
  return out;
}

inline Mask random_mask(std::size_t h, std::size_t w, double density, Rng& rng) {
  Mask m(h, w);
  for (auto& v : m.data) v = rng.coin(density);
  return m;
}

}  // namespace fpcnet::verify
