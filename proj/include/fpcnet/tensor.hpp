#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fpcnet/error.hpp"

namespace fpcnet {

// Extents of a rank 1-4 tensor. Rank 4 is always N x C x H x W.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) { assign(dims.begin(), dims.end()); }
  explicit Shape(std::span<const std::size_t> dims) { assign(dims.begin(), dims.end()); }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::span<const std::size_t> dims() const { return {dims_.data(), rank_}; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  friend bool operator==(const Shape& a, const Shape& b) {
    return std::ranges::equal(a.dims(), b.dims());
  }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  template <class It>
  void assign(It first, It last) {
    const auto n = static_cast<std::size_t>(std::distance(first, last));
    if (n == 0 || n > kMaxRank)
      throw ShapeError("tensor rank must be 1-4, got " + std::to_string(n));
    rank_ = n;
    std::size_t i = 0;
    for (; first != last; ++first, ++i) {
      if (*first == 0) throw ShapeError("zero extent in shape");
      dims_[i] = *first;
    }
  }

  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

// Seeded 64-bit Mersenne Twister. Every random draw in the library goes
// through one of these so that runs are reproducible from a seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  // Inclusive on both ends.
  std::size_t uniform_index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }
  bool coin(double p = 0.5) { return uniform(0.0, 1.0) < p; }

  // Independent child stream, used to give each epoch or worker its own draws.
  Rng fork() { return Rng(engine_()); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(const Shape& shape, T value = T(0)) : shape_(shape), data_(shape.numel(), value) {
    if (shape.rank() == 0) throw ShapeError("tensor needs a non-empty shape");
  }
  Tensor(const Shape& shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (shape.rank() == 0 || data_.size() != shape.numel())
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape.str());
  }

  static Tensor zeros(const Shape& s) { return Tensor(s, T(0)); }
  static Tensor ones(const Shape& s) { return Tensor(s, T(1)); }
  static Tensor full(const Shape& s, T v) { return Tensor(s, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Rank-4 indexing (n, c, h, w).
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(n, c, h, w)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }

  Tensor reshape(const Shape& s) const& {
    if (s.numel() != numel())
      throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, data_);
  }
  Tensor reshape(const Shape& s) && {
    if (s.numel() != numel())
      throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, std::move(data_));
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  T sum() const {
    T s = T(0);
    for (T v : data_) s += v;
    return s;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <class T>
Tensor<T> zeros(const Shape& s) { return Tensor<T>::zeros(s); }
template <class T>
Tensor<T> ones(const Shape& s) { return Tensor<T>::ones(s); }
template <class T>
Tensor<T> full(const Shape& s, T v) { return Tensor<T>::full(s, v); }
template <class T>
Tensor<T> ones_like(const Tensor<T>& t) { return Tensor<T>::ones(t.shape()); }
template <class T>
Tensor<T> zeros_like(const Tensor<T>& t) { return Tensor<T>::zeros(t.shape()); }

template <class T>
Tensor<T> randn(const Shape& s, double mean, double stddev, Rng& rng) {
  if (!(stddev >= 0.0)) throw UsageError("randn: standard deviation must be non-negative");
  Tensor<T> t(s);
  if (stddev == 0.0) {
    std::ranges::fill(t.data(), static_cast<T>(mean));
    return t;
  }
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng.engine()));
  return t;
}

template <class T>
Tensor<T> rand_uniform(const Shape& s, double lo, double hi, Rng& rng) {
  Tensor<T> t(s);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng.engine()));
  return t;
}

// Debug builds verify that sanctioned ops never emit NaN/Inf.
template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::ranges::all_of(t.data(), [](T v) { return std::isfinite(v); });
}

template <class T>
void debug_check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  if (!all_finite(t)) throw NumericalError(std::string("non-finite value produced by ") + op);
#endif
}

namespace detail {

// Per-channel broadcast of b ([1,C,1,1] or [C]) against a ([N,C,H,W]).
template <class T>
bool is_channel_vector_for(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4) return false;
  const auto& s = b.shape();
  if (s.rank() == 4) return s[0] == 1 && s[1] == a.dim(1) && s[2] == 1 && s[3] == 1;
  return s.rank() == 1 && s[0] == a.dim(1);
}

template <class T, class Op>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Op op, const char* name) {
  if (a.shape() == b.shape()) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = op(a[i], b[i]);
    debug_check_finite(out, name);
    return out;
  }
  if (is_channel_vector_for(a, b)) {
    Tensor<T> out(a.shape());
    const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t base = (i * c + j) * hw;
        for (std::size_t k = 0; k < hw; ++k) out[base + k] = op(a[base + k], b[j]);
      }
    debug_check_finite(out, name);
    return out;
  }
  throw ShapeError(std::string(name) + ": incompatible shapes " + a.shape().str() + " and " +
                   b.shape().str());
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, [](T x, T y) { return x + y; }, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, [](T x, T y) { return x - y; }, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, [](T x, T y) { return x * y; }, "mul");
}
template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  return out;
}

// In-place accumulate, used for gradient sums.
template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  if (!(dst.shape() == src.shape()))
    throw ShapeError("add_into: " + dst.shape().str() + " vs " + src.shape().str());
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

template <class T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("dot: shape mismatch");
  T s = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("max_abs_diff: shape mismatch");
  T m = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace fpcnet
