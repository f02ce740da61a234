#pragma once

// Self-verification suites shared by the selfcheck command, the unit tests
// and the acceptance runner.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fpcnet/autodiff.hpp"
#include "fpcnet/data.hpp"
#include "fpcnet/metrics.hpp"
#include "fpcnet/model.hpp"
#include "fpcnet/verify/gradcheck.hpp"
#include "fpcnet/verify/oracles.hpp"

namespace fpcnet::verify {

struct NamedProblem {
  std::string op;
  GradProblem problem;
};

namespace suite_detail {

inline TensorD gaussian(const Shape& s, Rng& rng, double std = 1.0) { return randn<double>(s, 0.0, std, rng); }

// He-scaled weights keep outputs O(1), so the loss difference is not swamped
// by roundoff in a large sum.
inline TensorD weight(const Shape& s, Rng& rng) {
  const std::size_t fan_in = s.numel() / s[0];
  return gaussian(s, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

// Values kept at least `gap` away from zero so central differences never
// straddle the ReLU kink.
inline TensorD away_from_zero(const Shape& s, Rng& rng, double gap = 1e-2) {
  TensorD t = gaussian(s, rng);
  for (auto& v : t.data())
    if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
  return t;
}

// Distinct values spaced 0.05 apart in random order, so no 2x2 window has a
// near-tie that a finite-difference step could flip.
inline TensorD spaced(const Shape& s, Rng& rng) {
  TensorD t(s);
  std::vector<double> v(s.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i) - 0.025 * static_cast<double>(v.size());
  std::shuffle(v.begin(), v.end(), rng.engine());
  std::copy(v.begin(), v.end(), t.ptr());
  return t;
}

// Projects an op's output onto a fixed random unit direction, keeping the
// scalar O(1) so its roundoff stays far below the difference being measured.
template <class F>
GradProblem projected(std::vector<TensorD> inputs, const Shape& out_shape, Rng& rng, F op) {
  TensorD dir = gaussian(out_shape, rng);
  dir = scale(dir, 1.0 / std::sqrt(dot(dir, dir)));
  return {std::move(inputs), [dir, op](Tape<double>&, const std::vector<Var<double>>& v) {
            return nn::weighted_sum(op(v), dir);
          }};
}

}  // namespace suite_detail

// One small randomized problem per differentiable op.
inline std::vector<NamedProblem> op_problems(std::uint64_t seed) {
  using namespace suite_detail;
  using V = std::vector<Var<double>>;
  Rng rng(seed);
  std::vector<NamedProblem> out;

  for (std::size_t r : {1, 3}) {
    const ops::ConvSpec spec = ops::ConvSpec::same(3, r);
    out.push_back({"conv2d(k=3,r=" + std::to_string(r) + ")",
                   projected({gaussian({2, 3, 7, 6}, rng), weight({4, 3, 3, 3}, rng), gaussian({4}, rng)},
                             {2, 4, 7, 6}, rng,
                             [spec](const V& v) { return nn::conv2d(v[0], v[1], v[2], spec); })});
  }
  out.push_back({"conv2d(k=1)", projected({gaussian({2, 5, 3, 4}, rng), weight({3, 5, 1, 1}, rng), gaussian({3}, rng)},
                                          {2, 3, 3, 4}, rng,
                                          [](const V& v) { return nn::conv2d(v[0], v[1], v[2], ops::ConvSpec{}); })});
  out.push_back({"transposed_conv2d",
                 projected({gaussian({2, 4, 3, 2}, rng), weight({4, 2, 2, 2}, rng), gaussian({2}, rng)}, {2, 2, 6, 4},
                           rng, [](const V& v) { return nn::transposed_conv2d(v[0], v[1], std::optional(v[2])); })});
  out.push_back({"maxpool2x2", projected({spaced({2, 2, 6, 4}, rng)}, {2, 2, 3, 2}, rng,
                                         [](const V& v) { return nn::maxpool2x2(v[0]); })});
  out.push_back({"global_avg_pool", projected({gaussian({2, 3, 4, 5}, rng)}, {2, 3, 1, 1}, rng,
                                              [](const V& v) { return nn::global_avg_pool(v[0]); })});
  out.push_back({"broadcast_spatial", projected({gaussian({2, 3, 1, 1}, rng)}, {2, 3, 4, 3}, rng,
                                                [](const V& v) { return nn::broadcast_spatial(v[0], 4, 3); })});
  out.push_back({"relu", projected({away_from_zero({2, 3, 4, 4}, rng)}, {2, 3, 4, 4}, rng,
                                   [](const V& v) { return nn::relu(v[0]); })});
  out.push_back({"sigmoid", projected({gaussian({2, 3, 4, 4}, rng, 2.0)}, {2, 3, 4, 4}, rng,
                                      [](const V& v) { return nn::sigmoid(v[0]); })});
  out.push_back({"fully_connected", projected({gaussian({3, 6}, rng), weight({4, 6}, rng), gaussian({4}, rng)}, {3, 4},
                                              rng, [](const V& v) { return nn::fully_connected(v[0], v[1], v[2]); })});
  out.push_back({"concat_channels",
                 projected({gaussian({2, 1, 3, 3}, rng), gaussian({2, 2, 3, 3}, rng), gaussian({2, 3, 3, 3}, rng)},
                           {2, 6, 3, 3}, rng, [](const V& v) { return nn::concat_channels(v); })});
  out.push_back({"scale_channels", projected({gaussian({2, 3, 4, 4}, rng), gaussian({2, 3}, rng)}, {2, 3, 4, 4}, rng,
                                             [](const V& v) { return nn::scale_channels(v[0], v[1]); })});
  out.push_back({"add", projected({gaussian({2, 3, 4, 4}, rng), gaussian({2, 3, 4, 4}, rng)}, {2, 3, 4, 4}, rng,
                                  [](const V& v) { return nn::add(v[0], v[1]); })});
  {
    TensorD pred = rand_uniform<double>({2, 1, 4, 4}, 0.05, 0.95, rng);
    TensorD target({2, 1, 4, 4});
    for (auto& t : target.data()) t = rng.coin(0.4) ? 1.0 : 0.0;
    out.push_back({"bce_dice_loss", {{pred}, [target](Tape<double>&, const V& v) {
                                       return nn::bce_dice_loss(v[0], target);
                                     }}});
  }
  return out;
}

// The full network on a tiny config: every parameter tensor is an input.
struct NetworkProblem {
  NetworkConfig config;
  std::vector<std::string> names;
  GradProblem problem;
};

inline NetworkProblem network_problem(std::uint64_t seed, std::size_t size = 32) {
  Rng rng(seed);
  NetworkProblem np{NetworkConfig::tiny(3), {}, {}};
  const auto params = init_parameters<double>(np.config, rng);
  // Non-zero biases so every bias gradient path is exercised away from zero.
  for (const auto& [name, t] : params) {
    np.names.push_back(name);
    TensorD v = t;
    if (name.ends_with(".bias"))
      for (auto& b : v.data()) b = rng.normal(0.0, 0.1);
    np.problem.inputs.push_back(std::move(v));
  }
  const TensorD image = rand_uniform<double>({1, 3, size, size}, 0.0, 1.0, rng);
  TensorD target({1, 1, size, size});
  for (auto& t : target.data()) t = rng.coin(0.3) ? 1.0 : 0.0;
  np.problem.loss = [cfg = np.config, names = np.names, image, target](Tape<double>& tape,
                                                                       const std::vector<Var<double>>& v) {
    VarParams<double> p;
    for (std::size_t i = 0; i < names.size(); ++i) p.vars.emplace(names[i], v[i]);
    return nn::bce_dice_loss(fpcnet_forward(cfg, p, tape.constant(image)), target);
  };
  return np;
}

// ---------------------------------------------------------------------------
// Suite runners.

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline std::string describe(const GradCheckResult& r) {
  std::ostringstream os;
  os << "max rel err " << r.max_relative_error << " over " << r.probes << " probes";
  if (r.skipped) os << " (" << r.skipped << " resampled at branch points)";
  if (!r.passed) os << "; worst " << r.worst;
  return os.str();
}

inline std::vector<GradCheckResult> run_gradient_checks(const std::vector<NamedProblem>& problems,
                                                        const GradCheckOptions& opt = {}) {
  std::vector<GradCheckResult> out;
  for (const auto& p : problems) out.push_back(gradient_check(p.op, p.problem, opt));
  return out;
}

// Names of the ops whose check failed, comma separated.
inline std::string failing_ops(const std::vector<GradCheckResult>& results) {
  std::string s;
  for (const auto& r : results)
    if (!r.passed) s += (s.empty() ? "" : ", ") + r.name;
  return s;
}

inline SuiteResult gradient_suite(std::size_t seeds = 20, std::uint64_t base_seed = 1) {
  SuiteResult res{"gradient (per op)", true, {}};
  double worst = 0.0;
  std::string failed;
  for (std::size_t s = 0; s < seeds; ++s) {
    auto results = run_gradient_checks(op_problems(base_seed + s));
    for (const auto& r : results) {
      worst = std::max(worst, r.max_relative_error);
      if (!r.passed) failed += (failed.empty() ? "" : "; ") + r.name + " seed " + std::to_string(base_seed + s) + ": " + describe(r);
    }
  }
  res.passed = failed.empty();
  std::ostringstream os;
  os << seeds << " seeds, max rel err " << worst;
  if (!failed.empty()) os << "; failed: " << failed;
  res.detail = os.str();
  return res;
}

inline GradCheckOptions network_check_options(std::uint64_t seed) {
  GradCheckOptions opt;
  opt.tolerance = 1e-5;
  opt.max_entries = 6;
  opt.sample_seed = seed;
  return opt;
}

inline SuiteResult network_gradient_suite(std::size_t seeds = 20, std::uint64_t base_seed = 100) {
  SuiteResult res{"gradient (tiny network, 32x32)", true, {}};
  double worst = 0.0;
  std::size_t probes = 0;
  std::string failed;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto np = network_problem(base_seed + s);
    const auto r = gradient_check("fpcnet", np.problem, network_check_options(base_seed + s));
    worst = std::max(worst, r.max_relative_error);
    probes += r.probes;
    if (!r.passed) failed += (failed.empty() ? "" : "; ") + std::string("seed ") + std::to_string(base_seed + s) + ": " + describe(r);
  }
  res.passed = failed.empty();
  std::ostringstream os;
  os << seeds << " seeds, " << probes << " probes, max rel err " << worst;
  if (!failed.empty()) os << "; failed: " << failed;
  res.detail = os.str();
  return res;
}

// Dilated conv2d against the direct-sum oracle for k in {1,3}, r in {1..4}.
inline SuiteResult conv_oracle_suite(std::uint64_t seed = 7) {
  SuiteResult res{"conv oracle", true, {}};
  Rng rng(seed);
  double worst = 0.0;
  std::ostringstream os;
  for (std::size_t k : {1, 3})
    for (std::size_t r = 1; r <= 4; ++r) {
      const auto spec = ops::ConvSpec::same(k, r);
      const TensorF x = randn<float>({2, 3, 11, 9}, 0.0, 1.0, rng);
      const TensorF w = randn<float>({4, 3, k, k}, 0.0, 1.0, rng);
      const TensorF b = randn<float>({4}, 0.0, 1.0, rng);
      const double d = max_abs_diff(ops::conv2d(x, w, &b, spec), conv2d_oracle(x, w, &b, r, spec.padding));
      worst = std::max(worst, d);
      if (!(d <= 1e-5)) {
        res.passed = false;
        os << "k=" << k << " r=" << r << " diff " << d << "; ";
      }
    }
  for (std::size_t r = 1; r <= 4; ++r)
    if (ops::effective_kernel_size(3, r) != 2 * r + 1) {
      res.passed = false;
      os << "effective kernel size wrong for r=" << r << "; ";
    }
  os << "max abs diff " << worst;
  res.detail = os.str();
  return res;
}

// Distance-transform evaluation against all-pairs matching.
inline SuiteResult metric_oracle_suite(std::size_t pairs = 200, std::uint64_t seed = 11) {
  SuiteResult res{"metric oracle", true, {}};
  Rng rng(seed);
  std::size_t checked = 0, mismatches = 0;
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::size_t h = rng.uniform_index(1, 32), w = rng.uniform_index(1, 32);
    const double dp = rng.uniform(0.0, 0.3), dg = rng.uniform(0.0, 0.3);
    const Mask pred = random_mask(h, w, dp, rng), gt = random_mask(h, w, dg, rng);
    for (long m : {0L, 1L, 2L, 5L}) {
      ++checked;
      if (!(evaluate_counts(pred, gt, static_cast<double>(m)) == evaluate_counts_bruteforce(pred, gt, m))) ++mismatches;
    }
  }
  res.passed = mismatches == 0;
  res.detail = std::to_string(checked) + " mask/margin cases, " + std::to_string(mismatches) + " mismatches";
  return res;
}

// 2048x1536 into 512 tiles and back, in shuffled order.
inline SuiteResult tile_suite(std::uint64_t seed = 13) {
  SuiteResult res{"tile round-trip", true, {}};
  Rng rng(seed);
  const TensorF x = rand_uniform<float>({1, 3, 1536, 2048}, 0.0, 1.0, rng);
  auto [grid, tiles] = tile(x, 512);
  std::shuffle(tiles.begin(), tiles.end(), rng.engine());
  const bool twelve = tiles.size() == 12 && grid.rows == 3 && grid.cols == 4;
  const bool exact = recombine(tiles, grid) == x;
  res.passed = twelve && exact;
  res.detail = std::to_string(tiles.size()) + " tiles (" + std::to_string(grid.rows) + "x" +
               std::to_string(grid.cols) + "), round-trip " + (exact ? "bitwise exact" : "MISMATCH");
  return res;
}

struct SelfcheckOptions {
  std::size_t gradient_seeds = 20;
  std::size_t network_seeds = 20;
};

inline std::vector<SuiteResult> selfcheck(const SelfcheckOptions& opt = {}) {
  return {gradient_suite(opt.gradient_seeds), network_gradient_suite(opt.network_seeds), conv_oracle_suite(),
          metric_oracle_suite(), tile_suite()};
}

}  // namespace fpcnet::verify
