#pragma once

// Small synthetic datasets used by the overfit check and the CLI smoke tests.

#include <filesystem>
#include <string>
#include <vector>

#include "fpcnet/data.hpp"
#include "fpcnet/image.hpp"
#include "fpcnet/metrics.hpp"
#include "fpcnet/model.hpp"
#include "fpcnet/training.hpp"

namespace fpcnet::verify {

// One white horizontal bar on black (mask = the bar) and one blank image.
inline std::vector<Sample> bar_fixture(std::size_t size = 32, std::size_t channels = 3) {
  Sample bar{TensorF(Shape{1, channels, size, size}), TensorF(Shape{1, 1, size, size}), "bar", std::nullopt};
  for (std::size_t r = size / 2 - 2; r < size / 2 + 2; ++r)
    for (std::size_t c = 4; c + 4 < size; ++c) {
      for (std::size_t ch = 0; ch < channels; ++ch) bar.image.data()[(ch * size + r) * size + c] = 1.0f;
      bar.mask.data()[r * size + c] = 1.0f;
    }
  Sample blank{TensorF(Shape{1, channels, size, size}), TensorF(Shape{1, 1, size, size}), "blank", std::nullopt};
  return {bar, blank};
}

// lr 0.05 took 50-70 steps to reach F1 1 across seeds; 0.01 is slower but smoother.
inline TrainOptions overfit_options(double lr = 0.05, std::size_t steps = 200) {
  TrainOptions o;
  o.augment_enabled = false;
  o.batch_size = 2;
  o.schedule.base_lr = lr;
  o.schedule.milestones = {};
  o.schedule.epochs = steps;
  return o;
}

// Pooled F1 of the thresholded prediction over a set of samples.
template <class T>
EvalReport training_f1(const NetworkConfig& cfg, const ParamStore<T>& params, const std::vector<Sample>& data,
                       double margin = 0.0) {
  EvalCounts c;
  for (const auto& s : data)
    c += evaluate_counts(binarize(predict(cfg, params, s.image.cast<T>())), mask_from_tensor(s.mask), margin);
  return EvalReport::from_counts(c, margin);
}

// Writes n noisy gray-ish images with one dark crack line each, plus masks and
// a manifest ("img/NNN.png<TAB>gt/NNN.png<TAB>type"). Returns the manifest path.
inline std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, std::size_t n,
                                                     std::size_t height, std::size_t width,
                                                     std::size_t channels, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "img");
  fs::create_directories(dir / "gt");
  Rng rng(seed);
  std::string manifest;
  for (std::size_t i = 0; i < n; ++i) {
    Image8 im(height, width, channels), mask(height, width, 1);
    for (auto& v : im.data) v = static_cast<std::uint8_t>(120 + rng.uniform_index(0, 60));
    const bool horizontal = i % 2 == 0;
    const std::size_t extent = horizontal ? height : width;
    const std::size_t at = rng.uniform_index(extent / 8, extent - extent / 8 - 3);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < (horizontal ? width : height); ++b) {
        const std::size_t r = horizontal ? at + a : b, c = horizontal ? b : at + a;
        mask.at(r, c) = 255;
        for (std::size_t ch = 0; ch < channels; ++ch) im.at(r, c, ch) = 40;
      }
    std::string name = std::to_string(i);
    name = std::string(name.size() < 3 ? 3 - name.size() : 0, '0') + name + ".png";
    write_png(dir / "img" / name, im);
    write_png(dir / "gt" / name, mask);
    manifest += "img/" + name + "\tgt/" + name + "\t" + (horizontal ? "transverse" : "longitudinal") + "\n";
  }
  write_text_atomic(dir / "manifest.tsv", manifest);
  return dir / "manifest.tsv";
}

}  // namespace fpcnet::verify
