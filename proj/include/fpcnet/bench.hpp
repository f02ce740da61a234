#pragma once

// Per-stage wall-clock timing of one prediction: decode, encoder, MD, decoder,
// then threshold and encode. Decode and encode make up the "other" row.

#include <array>
#include <chrono>
#include <iomanip>
#include <ostream>
#include <string>

#include "fpcnet/image.hpp"
#include "fpcnet/metrics.hpp"
#include "fpcnet/model.hpp"

namespace fpcnet {

struct BenchReport {
  static constexpr std::size_t kStages = 4;
  static constexpr std::array<const char*, kStages> kNames{"encoder", "md", "decoder", "other"};
  std::array<double, kStages> stage_ms{};
  double total_ms = 0.0;
  std::size_t repeats = 0;
  std::size_t warmup = 0;
  std::size_t height = 0, width = 0;

  double stage_sum_ms() const {
    double s = 0;
    for (double v : stage_ms) s += v;
    return s;
  }
  double fps() const { return total_ms > 0 ? 1000.0 / total_ms : 0.0; }
  // |sum - total| / total
  double accounting_error() const { return total_ms > 0 ? std::abs(stage_sum_ms() - total_ms) / total_ms : 1.0; }
};

template <class T = float>
BenchReport bench(const NetworkConfig& cfg, const ParamStore<T>& params, const Image8& input, std::size_t repeats,
                  std::size_t warmup = 3, double threshold = 0.5) {
  if (repeats == 0) throw UsageError("bench: repeat count must be positive");
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
  };
  const auto png = encode_png(input);
  const TensorParams<T> p{params};
  BenchReport r;
  r.repeats = repeats;
  r.warmup = warmup;
  r.height = input.height;
  r.width = input.width;
  std::size_t sink = 0;
  for (std::size_t run = 0; run < warmup + repeats; ++run) {
    const auto t0 = clock::now();
    const auto x = image_to_tensor<T>(image_detail::decode_png(png, "bench input"));
    const auto t1 = clock::now();
    auto enc = encoder_forward(cfg, p, x);
    const auto t2 = clock::now();
    const auto md = md_forward(cfg, p, enc.bottom);
    const auto t3 = clock::now();
    const auto prob = decoder_forward(cfg, p, md, enc.lateral);
    const auto t4 = clock::now();
    const auto mask = binarize(prob, threshold);
    sink += encode_png(tensor_to_image(prob)).size() + mask.data.size();
    const auto t5 = clock::now();
    if (run < warmup) continue;
    r.stage_ms[0] += ms(t1, t2);
    r.stage_ms[1] += ms(t2, t3);
    r.stage_ms[2] += ms(t3, t4);
    r.stage_ms[3] += ms(t0, t1) + ms(t4, t5);
    r.total_ms += ms(t0, t5);
  }
  for (double& v : r.stage_ms) v /= static_cast<double>(repeats);
  r.total_ms /= static_cast<double>(repeats);
  if (sink == 0) throw Error("bench: empty output");
  return r;
}

inline void write_bench_table(std::ostream& os, const BenchReport& r) {
  os << "stage\tms\tshare\n" << std::fixed << std::setprecision(3);
  for (std::size_t i = 0; i < BenchReport::kStages; ++i)
    os << BenchReport::kNames[i] << '\t' << r.stage_ms[i] << '\t' << std::setprecision(1)
       << 100.0 * r.stage_ms[i] / r.total_ms << "%\n"
       << std::setprecision(3);
  os << "total\t" << r.total_ms << "\t100.0%\n";
  os << "# " << r.width << "x" << r.height << ", mean of " << r.repeats << " after " << r.warmup
     << " warm-up, fps " << std::setprecision(2) << r.fps() << '\n';
  os.unsetf(std::ios::floatfield);
}

}  // namespace fpcnet
