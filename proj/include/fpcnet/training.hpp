#pragma once

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fpcnet/autodiff.hpp"
#include "fpcnet/checkpoint.hpp"
#include "fpcnet/data.hpp"
#include "fpcnet/model.hpp"

namespace fpcnet {

// ---------------------------------------------------------------------------
// Optimizer: classic momentum with weight decay folded into the velocity.
//   v <- mu v + (g + lambda w);  w <- w - eta v

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  friend bool operator==(const SgdConfig&, const SgdConfig&) = default;
};

template <class T>
struct OptimizerState {
  SgdConfig sgd;
  double lr = 0.01;
  ParamStore<T> velocity;
};

template <class T>
OptimizerState<T> make_optimizer(const ParamStore<T>& params, const SgdConfig& sgd, double lr) {
  OptimizerState<T> st{sgd, lr, {}};
  for (const auto& [name, t] : params) st.velocity.add(name, zeros_like(t));
  return st;
}

template <class T>
void sgd_step(ParamStore<T>& params, const ParamStore<T>& grads, OptimizerState<T>& st) {
  if (!(st.lr > 0.0)) throw UsageError("sgd_step: learning rate must be positive");
  const T mu = static_cast<T>(st.sgd.momentum), lambda = static_cast<T>(st.sgd.weight_decay);
  const T eta = static_cast<T>(st.lr);
  // Check everything first so a bad gradient leaves the parameters untouched.
  for (const auto& [name, w] : params) {
    if (!grads.contains(name)) throw Error("sgd_step: no gradient for '" + name + "'");
    const auto& g = grads.get(name);
    if (!(g.shape() == w.shape()))
      throw ShapeError("sgd_step: gradient for '" + name + "' is " + g.shape().str() + ", parameter is " +
                       w.shape().str());
    if (!all_finite(g)) throw NumericalError("sgd_step: non-finite gradient in '" + name + "'");
  }
  for (auto& [name, w] : params) {
    const auto& g = grads.get(name);
    auto& v = st.velocity.get(name);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      v[i] = mu * v[i] + (g[i] + lambda * w[i]);
      w[i] -= eta * v[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Step schedule: divide by `factor` at each milestone epoch.

struct Schedule {
  double base_lr = 0.01;
  double factor = 10.0;
  std::vector<std::size_t> milestones{50, 80, 110};
  std::size_t epochs = 120;

  void validate() const {
    if (!(base_lr > 0.0)) throw UsageError("schedule: base_lr must be positive");
    if (!(factor >= 1.0)) throw UsageError("schedule: factor must be >= 1");
    if (epochs == 0) throw UsageError("schedule: epochs must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (i && milestones[i] <= milestones[i - 1]) throw UsageError("schedule: milestones must increase");
      if (milestones[i] >= epochs) throw UsageError("schedule: milestone beyond the final epoch");
    }
  }
  friend bool operator==(const Schedule&, const Schedule&) = default;
};

inline double lr_at(std::size_t epoch, const Schedule& s) {
  if (epoch >= s.epochs)
    throw UsageError("lr_at: epoch " + std::to_string(epoch) + " outside [0," + std::to_string(s.epochs) + ")");
  int k = 0;
  for (auto m : s.milestones) k += epoch >= m;
  return s.base_lr / std::pow(s.factor, k);
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainOptions {
  Schedule schedule;
  SgdConfig sgd;
  AugmentConfig augment;
  bool augment_enabled = true;
  std::size_t batch_size = 1;
  // Write a checkpoint every N epochs (0: only at the end) to this path.
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;
  // Stop after this many optimizer steps (0: run the full schedule).
  std::size_t max_steps = 0;
};

struct EpochLog {
  std::size_t epoch;
  double mean_loss;
  double lr;
};

template <class T>
struct TrainResult {
  Checkpoint<T> checkpoint;
  std::vector<EpochLog> epochs;
  std::vector<double> step_losses;
};

template <class T>
Checkpoint<T> make_checkpoint(const NetworkConfig& cfg, const ParamStore<T>& params, const OptimizerState<T>& st) {
  return {cfg, params, st.velocity};
}

// One forward/backward/update on a stacked batch.
template <class T>
double train_step(const NetworkConfig& cfg, ParamStore<T>& params, OptimizerState<T>& st, const Tensor<T>& images,
                  const Tensor<T>& masks) {
  Tape<T> tape;
  const auto p = VarParams<T>::on_tape(tape, params);
  const auto x = tape.constant(images);
  const auto loss = nn::bce_dice_loss(fpcnet_forward(cfg, p, x), masks);
  const double value = static_cast<double>(loss.value()[0]);
  if (!std::isfinite(value)) throw NumericalError("non-finite loss");
  tape.backward(loss);
  ParamStore<T> grads;
  for (const auto& [name, t] : params) {
    const auto v = p(name);
    grads.add(name, tape.has_grad(v.id) ? tape.grad(v.id) : zeros_like(t));
  }
  sgd_step(params, grads, st);
  return value;
}

template <class T = float>
TrainResult<T> train(const NetworkConfig& cfg, const TrainOptions& opt, const std::vector<Sample>& data, Rng& rng,
                     std::ostream* log = nullptr, std::optional<ParamStore<T>> init = std::nullopt) {
  cfg.validate();
  opt.schedule.validate();
  if (data.empty()) throw DataError("train: empty training set");
  if (opt.batch_size == 0) throw UsageError("train: batch_size must be positive");

  ParamStore<T> params = init ? std::move(*init) : init_parameters<T>(cfg, rng);
  validate_parameters(cfg, params);
  OptimizerState<T> st = make_optimizer(params, opt.sgd, opt.schedule.base_lr);
  TrainResult<T> res;
  auto save = [&] {
    if (!opt.checkpoint_path.empty()) save_checkpoint(make_checkpoint(cfg, params, st), opt.checkpoint_path);
  };

  std::vector<std::size_t> order(data.size());
  std::size_t steps = 0;
  bool done = false;
  for (std::size_t epoch = 0; epoch < opt.schedule.epochs && !done; ++epoch) {
    st.lr = lr_at(epoch, opt.schedule);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b * opt.batch_size < order.size(); ++b) {
      std::vector<Sample> batch;
      std::string ids;
      for (std::size_t k = b * opt.batch_size; k < std::min(order.size(), (b + 1) * opt.batch_size); ++k) {
        const Sample& s = data[order[k]];
        batch.push_back(opt.augment_enabled ? augment(s, opt.augment, rng) : s);
        ids += (ids.empty() ? "" : ",") + s.id;
      }
      std::vector<const TensorF*> im, mk;
      for (const auto& s : batch) {
        im.push_back(&s.image);
        mk.push_back(&s.mask);
      }
      double loss;
      try {
        loss = train_step(cfg, params, st, stack(im).template cast<T>(), stack(mk).template cast<T>());
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b) + " (samples " + ids + ")");
      }
      res.step_losses.push_back(loss);
      total += loss;
      ++batches;
      if (opt.max_steps && ++steps >= opt.max_steps) {
        done = true;
        break;
      }
    }
    res.epochs.push_back({epoch, total / static_cast<double>(batches), st.lr});
    if (log) {
      *log << epoch << '\t' << std::setprecision(9) << res.epochs.back().mean_loss << '\t' << st.lr << '\n';
      log->flush();
    }
    if (opt.checkpoint_every && (epoch + 1) % opt.checkpoint_every == 0) save();
  }
  save();
  res.checkpoint = make_checkpoint(cfg, params, st);
  return res;
}

}  // namespace fpcnet
