#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fpcnet/error.hpp"
#include "fpcnet/image.hpp"
#include "fpcnet/metrics.hpp"
#include "fpcnet/tensor.hpp"
#include "fpcnet/util.hpp"

namespace fpcnet {

struct Sample {
  TensorF image;  // [1,C,H,W] in [0,1]
  TensorF mask;   // [1,1,H,W] in {0,1}
  std::string id;
  std::optional<std::string> crack_type;
};

// Masks are binarized at 128. Values other than 0 and 255 are legal but
// counted and reported through `warn`.
inline TensorF mask_from_image(const Image8& im, const std::string& what, std::ostream* warn = &std::cerr) {
  if (im.channels != 1) throw DataError("mask '" + what + "' must be single-channel");
  TensorF m(Shape{1, 1, im.height, im.width});
  std::size_t odd = 0;
  for (std::size_t i = 0; i < im.data.size(); ++i) {
    const auto v = im.data[i];
    if (v != 0 && v != 255) ++odd;
    m[i] = v >= 128 ? 1.0f : 0.0f;
  }
  if (odd && warn)
    *warn << "warning: mask '" << what << "' has " << odd << " of " << im.data.size()
          << " pixels outside {0,255}; binarized at 128\n";
  return m;
}

// RGB -> gray by Rec. 601 luma, gray -> RGB by replication.
template <class T>
Tensor<T> to_channels(const Tensor<T>& x, std::size_t channels) {
  if (x.rank() != 4 || (x.dim(1) != 1 && x.dim(1) != 3))
    throw ShapeError("to_channels: expected [N,1|3,H,W], got " + x.shape().str());
  if (channels != 1 && channels != 3) throw UsageError("to_channels: channels must be 1 or 3");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c == channels) return x;
  Tensor<T> out(Shape{n, channels, x.dim(2), x.dim(3)});
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = x.ptr() + b * c * hw;
    T* dst = out.ptr() + b * channels * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      if (channels == 1)
        dst[i] = T(0.299) * src[i] + T(0.587) * src[hw + i] + T(0.114) * src[2 * hw + i];
      else
        dst[i] = dst[hw + i] = dst[2 * hw + i] = src[i];
    }
  }
  return out;
}

inline Sample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                          std::ostream* warn = &std::cerr) {
  const Image8 im = read_image(image_path);
  const Image8 mk = read_image(mask_path);
  if (im.height != mk.height || im.width != mk.width)
    throw DataError("image '" + image_path.string() + "' is " + std::to_string(im.width) + "x" +
                    std::to_string(im.height) + " but mask '" + mask_path.string() + "' is " +
                    std::to_string(mk.width) + "x" + std::to_string(mk.height));
  return {image_to_tensor<float>(im), mask_from_image(mk, mask_path.string(), warn), image_path.stem().string(),
          std::nullopt};
}

// ---------------------------------------------------------------------------
// Manifest: "image<TAB>mask[<TAB>crack_type]" per line, '#' comments.
// Relative paths resolve against the manifest's directory.

struct ManifestEntry {
  std::filesystem::path image;
  std::filesystem::path mask;
  std::optional<std::string> crack_type;
};

inline std::vector<ManifestEntry> parse_manifest(std::string_view text, const std::filesystem::path& base = {}) {
  std::vector<ManifestEntry> out;
  std::size_t lineno = 0;
  for (const auto& raw : util::split(text, '\n')) {
    ++lineno;
    std::string_view line = raw;
    if (auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
    if (util::trim(line).empty()) continue;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    auto f = util::split(line, '\t');
    if (f.size() < 2 || f.size() > 3)
      throw DataError("manifest line " + std::to_string(lineno) + ": expected image<TAB>mask[<TAB>type]");
    ManifestEntry e;
    e.image = base / std::string(util::trim(f[0]));
    e.mask = base / std::string(util::trim(f[1]));
    if (f.size() == 3) {
      std::string t(util::trim(f[2]));
      if (!is_crack_type(t))
        throw DataError("manifest line " + std::to_string(lineno) + ": unknown crack type '" + t + "'");
      e.crack_type = t;
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_text(path), path.parent_path());
}

inline std::vector<Sample> load_dataset(const std::vector<ManifestEntry>& entries, std::ostream* warn = &std::cerr) {
  std::vector<Sample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    out.push_back(load_sample(e.image, e.mask, warn));
    out.back().crack_type = e.crack_type;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometric transforms on [N,C,H,W] tensors.

template <class T>
Tensor<T> crop(const Tensor<T>& x, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (top + h > x.dim(2) || left + w > x.dim(3))
    throw ShapeError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(top) + "," +
                     std::to_string(left) + ") exceeds " + x.shape().str());
  Tensor<T> y(Shape{x.dim(0), x.dim(1), h, w});
  std::size_t o = 0;
  for (std::size_t p = 0; p < x.dim(0) * x.dim(1); ++p)
    for (std::size_t i = 0; i < h; ++i) {
      const T* src = x.ptr() + (p * x.dim(2) + top + i) * x.dim(3) + left;
      std::copy(src, src + w, y.ptr() + o);
      o += w;
    }
  return y;
}

// Clockwise quarter turn: out(i, j) = in(H-1-j, i).
template <class T>
Tensor<T> rot90(const Tensor<T>& x) {
  const std::size_t h = x.dim(2), w = x.dim(3);
  Tensor<T> y(Shape{x.dim(0), x.dim(1), w, h});
  for (std::size_t p = 0; p < x.dim(0) * x.dim(1); ++p) {
    const T* src = x.ptr() + p * h * w;
    T* dst = y.ptr() + p * h * w;
    for (std::size_t i = 0; i < w; ++i)
      for (std::size_t j = 0; j < h; ++j) dst[i * h + j] = src[(h - 1 - j) * w + i];
  }
  return y;
}

template <class T>
Tensor<T> rot180(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t hw = x.dim(2) * x.dim(3);
  for (std::size_t p = 0; p < x.dim(0) * x.dim(1); ++p)
    std::reverse_copy(x.ptr() + p * hw, x.ptr() + (p + 1) * hw, y.ptr() + p * hw);
  return y;
}

template <class T>
Tensor<T> hflip(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t w = x.dim(3);
  for (std::size_t r = 0; r < x.numel() / w; ++r)
    std::reverse_copy(x.ptr() + r * w, x.ptr() + (r + 1) * w, y.ptr() + r * w);
  return y;
}

// ---------------------------------------------------------------------------
// Augmentation.

struct AugmentConfig {
  bool rot90 = true;
  bool rot180 = true;
  bool hflip = true;
  bool jitter = true;
  // Multiplicative factors are drawn from [1-a, 1+a].
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;  // ignored for grayscale input
  std::size_t crop = 288;   // 0 disables cropping
  double probability = 0.5;

  void validate() const {
    for (double a : {brightness, contrast, saturation})
      if (!(a >= 0.0 && a <= 1.0)) throw UsageError("augment: jitter amplitudes must be in [0,1]");
    if (!(probability >= 0.0 && probability <= 1.0)) throw UsageError("augment: probability must be in [0,1]");
  }
  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

// Every random decision for one sample, drawn up front so the same plan can
// be replayed on the mask alone.
struct AugmentPlan {
  std::size_t top = 0, left = 0, crop_h = 0, crop_w = 0;
  bool rot90 = false, rot180 = false, hflip = false;
  double brightness = 1.0, contrast = 1.0, saturation = 1.0;
};

inline AugmentPlan draw_plan(const AugmentConfig& cfg, std::size_t h, std::size_t w, std::size_t channels,
                             Rng& rng) {
  cfg.validate();
  AugmentPlan p;
  if (cfg.crop) {
    if (cfg.crop > h || cfg.crop > w)
      throw DataError("crop " + std::to_string(cfg.crop) + " is larger than the " + std::to_string(w) + "x" +
                      std::to_string(h) + " image");
    p.crop_h = p.crop_w = cfg.crop;
    p.top = rng.uniform_index(0, h - cfg.crop);
    p.left = rng.uniform_index(0, w - cfg.crop);
  } else {
    p.crop_h = h;
    p.crop_w = w;
  }
  if (cfg.rot90) p.rot90 = rng.coin(cfg.probability);
  if (cfg.rot180) p.rot180 = rng.coin(cfg.probability);
  if (cfg.hflip) p.hflip = rng.coin(cfg.probability);
  if (cfg.jitter && rng.coin(cfg.probability)) {
    p.brightness = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);
    p.contrast = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
    if (channels == 3) p.saturation = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation);
  }
  return p;
}

template <class T>
Tensor<T> apply_geometry(const Tensor<T>& x, const AugmentPlan& p) {
  Tensor<T> y = crop(x, p.top, p.left, p.crop_h, p.crop_w);
  if (p.rot90) y = rot90(y);
  if (p.rot180) y = rot180(y);
  if (p.hflip) y = hflip(y);
  return y;
}

// Brightness, then contrast about the mean luma, then saturation about the
// per-pixel luma. Clipped to [0,1].
template <class T>
void apply_jitter(Tensor<T>& x, const AugmentPlan& p) {
  if (p.brightness == 1.0 && p.contrast == 1.0 && p.saturation == 1.0) return;
  const std::size_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto luma = [&](std::size_t n, std::size_t i) {
    const T* b = x.ptr() + n * c * hw;
    if (c == 1) return static_cast<double>(b[i]);
    return 0.299 * b[i] + 0.587 * b[hw + i] + 0.114 * b[2 * hw + i];
  };
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    T* b = x.ptr() + n * c * hw;
    for (std::size_t i = 0; i < c * hw; ++i) b[i] = static_cast<T>(b[i] * p.brightness);
    double mean = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mean += luma(n, i);
    mean /= static_cast<double>(hw);
    for (std::size_t i = 0; i < c * hw; ++i) b[i] = static_cast<T>((b[i] - mean) * p.contrast + mean);
    if (c == 3 && p.saturation != 1.0)
      for (std::size_t i = 0; i < hw; ++i) {
        const double g = luma(n, i);
        for (std::size_t ch = 0; ch < 3; ++ch) b[ch * hw + i] = static_cast<T>((b[ch * hw + i] - g) * p.saturation + g);
      }
    for (std::size_t i = 0; i < c * hw; ++i) b[i] = std::clamp(b[i], T(0), T(1));
  }
}

inline Sample apply_plan(const Sample& s, const AugmentPlan& p) {
  Sample out{apply_geometry(s.image, p), apply_geometry(s.mask, p), s.id, s.crack_type};
  apply_jitter(out.image, p);
  return out;
}

inline Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
  return apply_plan(s, draw_plan(cfg, s.image.dim(2), s.image.dim(3), s.image.dim(1), rng));
}

// ---------------------------------------------------------------------------
// Train/test split.

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// floor(n*f + 0.5) samples go to training unless train_count overrides it.
inline Split split_indices(std::size_t n, double train_fraction, Rng& rng,
                           std::optional<std::size_t> train_count = std::nullopt) {
  if (n == 0) throw DataError("split_dataset: empty dataset");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw UsageError("split_dataset: fraction must be in (0,1)");
  const std::size_t k =
      train_count ? *train_count : static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_fraction + 0.5));
  if (k > n) throw UsageError("split_dataset: train_count exceeds dataset size");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  Split s{{idx.begin(), idx.begin() + static_cast<long>(k)}, {idx.begin() + static_cast<long>(k), idx.end()}};
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

template <class Item>
std::pair<std::vector<Item>, std::vector<Item>> split_dataset(const std::vector<Item>& items, double train_fraction,
                                                              Rng& rng,
                                                              std::optional<std::size_t> train_count = std::nullopt) {
  const Split s = split_indices(items.size(), train_fraction, rng, train_count);
  std::pair<std::vector<Item>, std::vector<Item>> out;
  for (auto i : s.train) out.first.push_back(items[i]);
  for (auto i : s.test) out.second.push_back(items[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Non-overlapping tiling.

template <class T>
struct Tile {
  std::size_t row = 0, col = 0;
  Tensor<T> data;
};

struct TileGrid {
  std::size_t rows = 0, cols = 0, size = 0;
  Shape full{1};
};

template <class T>
std::pair<TileGrid, std::vector<Tile<T>>> tile(const Tensor<T>& x, std::size_t size) {
  if (x.rank() != 4) throw ShapeError("tile: expected [N,C,H,W], got " + x.shape().str());
  if (size == 0) throw UsageError("tile: tile size must be positive");
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (h % size || w % size)
    throw ShapeError("tile: " + std::to_string(w) + "x" + std::to_string(h) + " is not divisible by tile size " +
                     std::to_string(size));
  TileGrid g{h / size, w / size, size, x.shape()};
  std::vector<Tile<T>> tiles;
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c) tiles.push_back({r, c, crop(x, r * size, c * size, size, size)});
  return {g, std::move(tiles)};
}

// Tiles may arrive in any order; each grid cell must appear exactly once.
// Tile channel count may differ from the source (e.g. probability maps).
template <class T>
Tensor<T> recombine(const std::vector<Tile<T>>& tiles, const TileGrid& g) {
  if (tiles.empty()) throw ShapeError("recombine: no tiles");
  const std::size_t n = tiles.front().data.dim(0), c = tiles.front().data.dim(1);
  const std::size_t H = g.rows * g.size, W = g.cols * g.size;
  Tensor<T> y(Shape{n, c, H, W});
  std::vector<char> seen(g.rows * g.cols, 0);
  for (const auto& t : tiles) {
    if (t.row >= g.rows || t.col >= g.cols)
      throw ShapeError("recombine: tile (" + std::to_string(t.row) + "," + std::to_string(t.col) + ") outside grid");
    if (!(t.data.shape() == Shape{n, c, g.size, g.size}))
      throw ShapeError("recombine: tile (" + std::to_string(t.row) + "," + std::to_string(t.col) + ") has shape " +
                       t.data.shape().str());
    char& s = seen[t.row * g.cols + t.col];
    if (s) throw ShapeError("recombine: duplicate tile (" + std::to_string(t.row) + "," + std::to_string(t.col) + ")");
    s = 1;
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t i = 0; i < g.size; ++i) {
        const T* src = t.data.ptr() + (p * g.size + i) * g.size;
        std::copy(src, src + g.size, y.ptr() + (p * H + t.row * g.size + i) * W + t.col * g.size);
      }
  }
  for (std::size_t k = 0; k < seen.size(); ++k)
    if (!seen[k])
      throw ShapeError("recombine: missing tile (" + std::to_string(k / g.cols) + "," + std::to_string(k % g.cols) + ")");
  return y;
}

// Runs fn on each tile and stitches the results.
template <class T, class Fn>
Tensor<T> map_tiles(const Tensor<T>& x, std::size_t size, Fn&& fn) {
  auto [grid, tiles] = tile(x, size);
  for (auto& t : tiles) t.data = fn(t.data);
  return recombine(tiles, grid);
}

// Stacks [1,C,H,W] tensors into [N,C,H,W].
template <class T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ShapeError("stack: nothing to stack");
  const Shape& s = parts.front()->shape();
  Tensor<T> y(Shape{parts.size(), s[1], s[2], s[3]});
  const std::size_t step = parts.front()->numel();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!(parts[i]->shape() == s))
      throw ShapeError("stack: " + parts[i]->shape().str() + " does not match " + s.str());
    std::copy(parts[i]->ptr(), parts[i]->ptr() + step, y.ptr() + i * step);
  }
  return y;
}

}  // namespace fpcnet
