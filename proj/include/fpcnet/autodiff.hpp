#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fpcnet/ops/conv.hpp"
#include "fpcnet/ops/layers.hpp"
#include "fpcnet/tensor.hpp"

namespace fpcnet {

template <class T>
class Tape;

// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Tensor<T>& grad() const { return tape->grad(id); }
  const Shape& shape() const { return value().shape(); }
};

// Linear record of executed ops. backward() replays them in exact reverse
// order, accumulating gradients into every node that requires one.
template <class T>
class Tape {
 public:
  // Receives the node's accumulated gradient; pushes contributions to parents
  // through accumulate().
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, std::string name = "leaf", bool requires_grad = true) {
    nodes_.push_back(Node{std::move(name), std::move(value), std::nullopt, nullptr, requires_grad});
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), "constant", false); }

  Var<T> record(std::string op, Tensor<T> value, std::initializer_list<std::size_t> parents,
                Backward backward) {
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_.at(p).requires_grad;
    nodes_.push_back(Node{std::move(op), std::move(value), std::nullopt,
                          needs ? std::move(backward) : nullptr, needs});
    return {this, nodes_.size() - 1};
  }

  // Variadic-parent form for concatenation.
  Var<T> record(std::string op, Tensor<T> value, const std::vector<std::size_t>& parents,
                Backward backward) {
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_.at(p).requires_grad;
    nodes_.push_back(Node{std::move(op), std::move(value), std::nullopt,
                          needs ? std::move(backward) : nullptr, needs});
    return {this, nodes_.size() - 1};
  }

  void accumulate(std::size_t id, Tensor<T> g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (!(g.shape() == n.value.shape()))
      throw ShapeError("gradient " + g.shape().str() + " for '" + n.name + "' of shape " +
                       n.value.shape().str());
    if (n.grad)
      add_into(*n.grad, g);
    else
      n.grad = std::move(g);
  }

  void backward(Var<T> root) {
    if (root.value().numel() != 1) throw ShapeError("backward: root must be a scalar");
    visited_.clear();
    accumulate(root.id, Tensor<T>(root.value().shape(), T(1)));
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad || !n.backward) continue;
      visited_.push_back(i);
      n.backward(*this, *n.grad);
    }
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool has_grad(std::size_t id) const { return nodes_.at(id).grad.has_value(); }
  const Tensor<T>& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (!n.grad) throw Error("no gradient recorded for '" + n.name + "'");
    return *n.grad;
  }
  const std::string& name(std::size_t id) const { return nodes_.at(id).name; }
  std::size_t size() const { return nodes_.size(); }

  // Piecewise ops (relu, max pooling) fold the branch they took into this
  // hash. Two evaluations with equal signatures lie on the same smooth piece.
  void note_branch(std::uint64_t h) { branches_ = (branches_ ^ h) * 0x100000001b3ull + 0x9e3779b97f4a7c15ull; }
  std::uint64_t branch_signature() const { return branches_; }

  // Node ids whose backward ran, in the order it ran.
  const std::vector<std::size_t>& visit_order() const { return visited_; }

 private:
  struct Node {
    std::string name;
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    Backward backward;
    bool requires_grad;
  };

  std::vector<Node> nodes_;
  std::vector<std::size_t> visited_;
  std::uint64_t branches_ = 0xcbf29ce484222325ull;
};

// Differentiable front-end. Every function has a Tensor overload (plain
// inference) and a Var overload (recorded on the tape), so network code is
// written once against either.
namespace nn {

using ops::ConvSpec;
using ops::TransposedConvSpec;

// --- inference overloads ----------------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvSpec& s) {
  return ops::conv2d(x, w, &b, s);
}
template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* b,
                            const TransposedConvSpec& s = {}) {
  return ops::transposed_conv2d(x, w, b, s);
}
template <class T>
Tensor<T> maxpool2x2(const Tensor<T>& x) { return ops::maxpool2x2(x).output; }
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) { return ops::global_avg_pool(x); }
template <class T>
Tensor<T> broadcast_spatial(const Tensor<T>& x, std::size_t h, std::size_t w) {
  return ops::broadcast_spatial(x, h, w);
}
template <class T>
Tensor<T> relu(const Tensor<T>& x) { return ops::relu(x); }
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) { return ops::sigmoid(x); }
template <class T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return ops::fully_connected(x, w, b);
}
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  return ops::concat_channels<T>(std::span<const Tensor<T>* const>(ptrs));
}
template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) { return ops::scale_channels(x, s); }
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape()))
    throw ShapeError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  return fpcnet::add(a, b);
}
template <class T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& s) { return x.reshape(s); }
template <class T>
const Shape& shape_of(const Tensor<T>& x) { return x.shape(); }

// --- taped overloads --------------------------------------------------------

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, const ConvSpec& s) {
  Tape<T>& tape = *x.tape;
  return tape.record("conv2d", ops::conv2d(x.value(), w.value(), &b.value(), s),
                     {x.id, w.id, b.id},
                     [x = x.id, w = w.id, b = b.id, s](Tape<T>& t, const Tensor<T>& g) {
                       auto gr = ops::conv2d_backward(g, t.value(x), t.value(w), s);
                       t.accumulate(x, std::move(gr.input));
                       t.accumulate(w, std::move(gr.weight));
                       t.accumulate(b, std::move(gr.bias));
                     });
}

template <class T>
Var<T> transposed_conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> b,
                         const TransposedConvSpec& s = {}) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>* bias = b ? &b->value() : nullptr;
  const std::size_t bid = b ? b->id : x.id;
  const bool has_bias = b.has_value();
  auto value = ops::transposed_conv2d(x.value(), w.value(), bias, s);
  auto backward = [x = x.id, w = w.id, bid, has_bias, s](Tape<T>& t, const Tensor<T>& g) {
    auto gr = ops::transposed_conv2d_backward(g, t.value(x), t.value(w), s);
    t.accumulate(x, std::move(gr.input));
    t.accumulate(w, std::move(gr.weight));
    if (has_bias) t.accumulate(bid, std::move(gr.bias));
  };
  if (has_bias) return tape.record("transposed_conv2d", std::move(value), {x.id, w.id, bid}, backward);
  return tape.record("transposed_conv2d", std::move(value), {x.id, w.id}, backward);
}

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i, v >>= 8) h = (h ^ (v & 0xff)) * 0x100000001b3ull;
  return h;
}

}  // namespace detail

template <class T>
Var<T> maxpool2x2(Var<T> x) {
  auto r = ops::maxpool2x2(x.value());
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto i : r.argmax) h = detail::fnv1a(h, i);
  x.tape->note_branch(h);
  return x.tape->record("maxpool2x2", std::move(r.output), {x.id},
                        [x = x.id, idx = std::move(r.argmax)](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(x, ops::maxpool2x2_backward(g, std::span<const std::size_t>(idx),
                                                                   t.value(x).shape()));
                        });
}

template <class T>
Var<T> global_avg_pool(Var<T> x) {
  return x.tape->record("global_avg_pool", ops::global_avg_pool(x.value()), {x.id},
                        [x = x.id](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(x, ops::global_avg_pool_backward(g, t.value(x).shape()));
                        });
}

template <class T>
Var<T> broadcast_spatial(Var<T> x, std::size_t h, std::size_t w) {
  return x.tape->record("broadcast_spatial", ops::broadcast_spatial(x.value(), h, w), {x.id},
                        [x = x.id](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(x, ops::broadcast_spatial_backward(g));
                        });
}

template <class T>
Var<T> relu(Var<T> x) {
  std::uint64_t h = 0xcbf29ce484222325ull, bits = 0;
  const auto& v = x.value();
  for (std::size_t i = 0; i < v.numel(); ++i) {
    bits = (bits << 1) | (v[i] > T(0));
    if (i % 64 == 63) h = detail::fnv1a(h, bits), bits = 0;
  }
  x.tape->note_branch(detail::fnv1a(h, bits));
  return x.tape->record("relu", ops::relu(x.value()), {x.id},
                        [x = x.id](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(x, ops::relu_backward(g, t.value(x)));
                        });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const std::size_t self = tape.size();
  return tape.record("sigmoid", ops::sigmoid(x.value()), {x.id},
                     [x = x.id, self](Tape<T>& t, const Tensor<T>& g) {
                       t.accumulate(x, ops::sigmoid_backward(g, t.value(self)));
                     });
}

template <class T>
Var<T> fully_connected(Var<T> x, Var<T> w, Var<T> b) {
  return x.tape->record("fully_connected", ops::fully_connected(x.value(), w.value(), b.value()),
                        {x.id, w.id, b.id},
                        [x = x.id, w = w.id, b = b.id](Tape<T>& t, const Tensor<T>& g) {
                          auto gr = ops::fully_connected_backward(g, t.value(x), t.value(w));
                          t.accumulate(x, std::move(gr.input));
                          t.accumulate(w, std::move(gr.weight));
                          t.accumulate(b, std::move(gr.bias));
                        });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  std::vector<const Tensor<T>*> ptrs;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    ptrs.push_back(&p.value());
    ids.push_back(p.id);
    widths.push_back(p.value().dim(1));
  }
  Tape<T>& tape = *parts.front().tape;
  auto value = ops::concat_channels<T>(std::span<const Tensor<T>* const>(ptrs));
  return tape.record("concat_channels", std::move(value), ids,
                     [ids, widths](Tape<T>& t, const Tensor<T>& g) {
                       std::size_t first = 0;
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                         t.accumulate(ids[i], ops::slice_channels(g, first, widths[i]));
                         first += widths[i];
                       }
                     });
}

template <class T>
Var<T> scale_channels(Var<T> x, Var<T> s) {
  return x.tape->record("scale_channels", ops::scale_channels(x.value(), s.value()), {x.id, s.id},
                        [x = x.id, s = s.id](Tape<T>& t, const Tensor<T>& g) {
                          auto gr = ops::scale_channels_backward(g, t.value(x), t.value(s));
                          t.accumulate(x, std::move(gr.input));
                          t.accumulate(s, std::move(gr.weights));
                        });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  if (!(a.shape() == b.shape()))
    throw ShapeError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  return a.tape->record("add", fpcnet::add(a.value(), b.value()), {a.id, b.id},
                        [a = a.id, b = b.id](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(a, g);
                          t.accumulate(b, g);
                        });
}

template <class T>
Var<T> reshape(Var<T> x, const Shape& s) {
  return x.tape->record("reshape", x.value().reshape(s), {x.id},
                        [x = x.id](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(x, g.reshape(t.value(x).shape()));
                        });
}

template <class T>
const Shape& shape_of(Var<T> x) { return x.value().shape(); }

// Scalar [1] loss node.
template <class T>
Var<T> bce_dice_loss(Var<T> pred, const Tensor<T>& target) {
  Tensor<T> value(Shape{1}, ops::bce_dice_loss(pred.value(), target));
  return pred.tape->record("bce_dice_loss", std::move(value), {pred.id},
                           [p = pred.id, target](Tape<T>& t, const Tensor<T>& g) {
                             t.accumulate(p, ops::bce_dice_loss_backward(t.value(p), target, g[0]));
                           });
}

// sum(x * weights) for a fixed weight tensor, the projection used by gradient checks.
template <class T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights) {
  Tensor<T> value(Shape{1}, dot(x.value(), weights));
  return x.tape->record("weighted_sum", std::move(value), {x.id},
                        [x = x.id, weights](Tape<T>& t, const Tensor<T>& g) {
                          t.accumulate(x, scale(weights, g[0]));
                        });
}

}  // namespace nn
}  // namespace fpcnet
