#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>
#include <numeric>
#include <string>
#include <type_traits>
#include <vector>

#include "fpcnet/autodiff.hpp"

namespace fpcnet::verify {

// A scalar-valued computation over some inputs, checked in double precision.
struct GradProblem {
  std::vector<TensorD> inputs;
  std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)> loss;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  // Gradient components smaller than this are compared on an absolute scale;
  // central differences cannot resolve relative error below their roundoff.
  double magnitude_floor = 1e-3;
  // Entries probed per input; 0 probes every entry.
  std::size_t max_entries = 0;
  std::uint64_t sample_seed = 0;
  // Resample entries whose +-step evaluations change a relu or pooling branch.
  bool skip_branch_changes = true;
};

struct GradCheckResult {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t probes = 0;
  std::size_t skipped = 0;  // probes discarded for crossing a branch point
  bool passed = false;
  std::string worst;  // "input i[j]: analytic a vs numeric n"
};

namespace detail {

struct Evaluation {
  double loss;
  std::uint64_t branches;
};

inline Evaluation evaluate(const GradProblem& prob, const std::vector<TensorD>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  const double loss = prob.loss(tape, vars).value()[0];
  return {loss, tape.branch_signature()};
}

}  // namespace detail

// Central finite differences against the taped backward. Double only: f32
// differences are too noisy for these tolerances.
template <class T = double>
GradCheckResult gradient_check(const std::string& name, const GradProblem& prob,
                               const GradCheckOptions& opt = {}) {
  static_assert(std::is_same_v<T, double>, "gradient checks run in f64 mode only");
  GradCheckResult res{name, 0.0, 0, 0, false, {}};
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : prob.inputs) vars.push_back(tape.leaf(t));
  Var<double> loss = prob.loss(tape, vars);
  tape.backward(loss);

  const std::uint64_t base = tape.branch_signature();

  Rng pick(opt.sample_seed);
  std::vector<TensorD> probe = prob.inputs;
  for (std::size_t i = 0; i < prob.inputs.size(); ++i) {
    const std::size_t n = prob.inputs[i].numel();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    const bool sampled = opt.max_entries && opt.max_entries < n;
    if (sampled) std::shuffle(idx.begin(), idx.end(), pick.engine());
    const bool has = tape.has_grad(vars[i].id);
    std::size_t taken = 0;
    for (std::size_t j : idx) {
      if (sampled && taken == opt.max_entries) break;
      const double orig = probe[i][j];
      probe[i][j] = orig + opt.step;
      const auto up = detail::evaluate(prob, probe);
      probe[i][j] = orig - opt.step;
      const auto down = detail::evaluate(prob, probe);
      probe[i][j] = orig;
      // The step crossed a relu or pooling switch point: the difference
      // quotient does not approximate the derivative there.
      if (opt.skip_branch_changes && (up.branches != base || down.branches != base)) {
        ++res.skipped;
        continue;
      }
      ++taken;
      const double numeric = (up.loss - down.loss) / (2.0 * opt.step);
      const double analytic = has ? tape.grad(vars[i].id)[j] : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.magnitude_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++res.probes;
      if (rel > res.max_relative_error || !std::isfinite(rel)) {
        res.max_relative_error = std::isfinite(rel) ? rel : INFINITY;
        std::ostringstream os;
        os << std::setprecision(12) << "input " << i << "[" << j << "]: analytic " << analytic
           << " vs numeric " << numeric;
        res.worst = os.str();
      }
    }
  }
  res.passed = res.max_relative_error <= opt.tolerance;
  return res;
}

}  // namespace fpcnet::verify
