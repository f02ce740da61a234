#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fpcnet/autodiff.hpp"
#include "fpcnet/tensor.hpp"
#include "fpcnet/util.hpp"

namespace fpcnet {

struct NetworkConfig {
  std::size_t input_channels = 3;
  std::vector<std::size_t> encoder_channels{64, 128, 256, 512};
  std::size_t md_output_channels = 1024;
  std::vector<std::size_t> decoder_channels{512, 256, 128, 64};
  std::vector<std::size_t> dilation_rates{1, 2, 3, 4};
  // Bottleneck width is channels / se_reduction (ratio 1/16 by default).
  std::size_t se_reduction = 16;
  bool transposed_bias = true;

  // Channels [4,8,16,32]; small enough for finite-difference checks.
  static NetworkConfig tiny(std::size_t input_channels = 3) {
    NetworkConfig c;
    c.input_channels = input_channels;
    c.encoder_channels = {4, 8, 16, 32};
    c.md_output_channels = 64;
    c.decoder_channels = {32, 16, 8, 4};
    c.se_reduction = 4;
    return c;
  }

  std::size_t levels() const { return encoder_channels.size(); }
  // Spatial extents must be divisible by this.
  std::size_t spatial_multiple() const { return std::size_t(1) << levels(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw UsageError("network config: " + m); };
    if (input_channels != 1 && input_channels != 3) fail("input_channels must be 1 or 3");
    if (encoder_channels.empty()) fail("encoder_channels is empty");
    for (auto c : encoder_channels)
      if (c == 0) fail("encoder channel counts must be positive");
    if (decoder_channels != std::vector<std::size_t>(encoder_channels.rbegin(), encoder_channels.rend()))
      fail("decoder_channels must be the reverse of encoder_channels");
    std::size_t in = md_output_channels;
    for (auto c : decoder_channels) {
      if (in != 2 * c)
        fail("each decoder stage must halve its input channels (" + std::to_string(in) + " -> " +
             std::to_string(c) + ")");
      in = c;
    }
    if (dilation_rates.empty()) fail("dilation_rates is empty");
    std::set<std::size_t> seen;
    for (auto r : dilation_rates) {
      if (r < 1) fail("dilation rates must be >= 1");
      if (!seen.insert(r).second) fail("dilation rates must be distinct");
    }
    if (se_reduction == 0) fail("se_reduction must be positive");
    for (auto c : decoder_channels)
      if (c % se_reduction != 0 || c / se_reduction == 0)
        fail("se_reduction " + std::to_string(se_reduction) + " does not divide decoder channels " +
             std::to_string(c));
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "input_channels=" << input_channels << '\n'
       << "encoder_channels=" << util::join(encoder_channels) << '\n'
       << "md_output_channels=" << md_output_channels << '\n'
       << "decoder_channels=" << util::join(decoder_channels) << '\n'
       << "dilation_rates=" << util::join(dilation_rates) << '\n'
       << "se_reduction=" << se_reduction << '\n'
       << "transposed_bias=" << (transposed_bias ? 1 : 0) << '\n';
    return os.str();
  }

  // Applies one key=value setting; unknown keys are rejected.
  void set(std::string_view key, std::string_view value) {
    if (key == "input_channels") input_channels = util::parse_int<std::size_t>(value, key);
    else if (key == "encoder_channels") encoder_channels = util::parse_size_list(value, key);
    else if (key == "md_output_channels") md_output_channels = util::parse_int<std::size_t>(value, key);
    else if (key == "decoder_channels") decoder_channels = util::parse_size_list(value, key);
    else if (key == "dilation_rates") dilation_rates = util::parse_size_list(value, key);
    else if (key == "se_reduction") se_reduction = util::parse_int<std::size_t>(value, key);
    else if (key == "transposed_bias") transposed_bias = util::parse_bool(value, key);
    else throw UsageError("network config: unknown key '" + std::string(key) + "'");
  }

  static NetworkConfig from_text(std::string_view text) {
    NetworkConfig c;
    for (const auto& raw : util::split(text, '\n')) {
      const auto line = util::trim(raw);
      if (line.empty() || line.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw DataError("network config: malformed line '" + std::string(line) + "'");
      c.set(util::trim(line.substr(0, eq)), util::trim(line.substr(eq + 1)));
    }
    c.validate();
    return c;
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

// Insertion-ordered name -> tensor map.
template <class T>
class ParamStore {
 public:
  void add(std::string name, Tensor<T> value) {
    if (index_.contains(name)) throw Error("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const Tensor<T>& get(const std::string& name) const { return entries_[position(name)].second; }
  Tensor<T>& get(const std::string& name) { return entries_[position(name)].second; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.entries_ == b.entries_; }

 private:
  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class ParamKind { ConvWeight, TransposedWeight, LinearWeight, Bias };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
  // Number of terms summed into each output; drives He scaling.
  std::size_t fan_in;
};

namespace model_detail {

inline void add_conv(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in,
                     std::size_t outc, std::size_t k) {
  out.push_back({prefix + ".weight", Shape{outc, in, k, k}, ParamKind::ConvWeight, in * k * k});
  out.push_back({prefix + ".bias", Shape{outc}, ParamKind::Bias, 0});
}

inline void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in,
                       std::size_t outc) {
  out.push_back({prefix + ".weight", Shape{outc, in}, ParamKind::LinearWeight, in});
  out.push_back({prefix + ".bias", Shape{outc}, ParamKind::Bias, 0});
}

}  // namespace model_detail

inline std::string encoder_prefix(std::size_t level, std::size_t conv) {
  return "enc" + std::to_string(level) + ".conv" + std::to_string(conv);
}
inline std::string md_dilated_prefix(std::size_t branch) { return "md.dilated" + std::to_string(branch); }
inline std::string decoder_prefix(std::size_t stage) { return "dec" + std::to_string(stage); }

// Every learnable tensor of the network, in forward order.
inline std::vector<ParamSpec> parameter_layout(const NetworkConfig& cfg) {
  using namespace model_detail;
  cfg.validate();
  std::vector<ParamSpec> out;
  std::size_t in = cfg.input_channels;
  for (std::size_t i = 0; i < cfg.levels(); ++i) {
    const std::size_t c = cfg.encoder_channels[i];
    add_conv(out, encoder_prefix(i, 0), in, c, 3);
    add_conv(out, encoder_prefix(i, 1), c, c, 3);
    in = c;
  }
  for (std::size_t b = 0; b < cfg.dilation_rates.size(); ++b) add_conv(out, md_dilated_prefix(b), in, in, 3);
  add_conv(out, "md.global", in, in, 1);
  add_conv(out, "md.fuse", in * (cfg.dilation_rates.size() + 2), cfg.md_output_channels, 1);
  std::size_t c_in = cfg.md_output_channels;
  for (std::size_t s = 0; s < cfg.levels(); ++s) {
    const std::size_t c = cfg.decoder_channels[s];
    const std::string p = decoder_prefix(s);
    // Each output pixel of a 2x2/stride-2 transposed conv sums c_in terms.
    out.push_back({p + ".up.weight", Shape{c_in, c, 2, 2}, ParamKind::TransposedWeight, c_in});
    if (cfg.transposed_bias) out.push_back({p + ".up.bias", Shape{c}, ParamKind::Bias, 0});
    add_linear(out, p + ".squeeze", c, c / cfg.se_reduction);
    add_linear(out, p + ".excite", c / cfg.se_reduction, c);
    c_in = c;
  }
  add_conv(out, "head", c_in, 1, 1);
  return out;
}

// He-normal weights, zero biases.
template <class T>
ParamStore<T> init_parameters(const NetworkConfig& cfg, Rng& rng) {
  ParamStore<T> store;
  for (const auto& spec : parameter_layout(cfg)) {
    if (spec.kind == ParamKind::Bias) {
      store.add(spec.name, Tensor<T>::zeros(spec.shape));
      continue;
    }
    const double stddev = std::sqrt(2.0 / static_cast<double>(spec.fan_in));
    store.add(spec.name, randn<T>(spec.shape, 0.0, stddev, rng));
  }
  return store;
}

// Throws ShapeError naming the first tensor that disagrees with the layout.
template <class T>
void validate_parameters(const NetworkConfig& cfg, const ParamStore<T>& store) {
  const auto layout = parameter_layout(cfg);
  for (const auto& spec : layout) {
    if (!store.contains(spec.name)) throw ShapeError("missing parameter '" + spec.name + "'");
    const auto& t = store.get(spec.name);
    if (!(t.shape() == spec.shape))
      throw ShapeError("parameter '" + spec.name + "' has shape " + t.shape().str() + ", config expects " +
                       spec.shape.str());
  }
  if (store.size() != layout.size())
    throw ShapeError("parameter store has " + std::to_string(store.size()) + " tensors, config expects " +
                     std::to_string(layout.size()));
}

// ---------------------------------------------------------------------------
// Parameter views. The forward pass is written once against either.

template <class T>
struct TensorParams {
  const ParamStore<T>& store;
  const Tensor<T>& operator()(const std::string& name) const { return store.get(name); }
  const Tensor<T>* optional(const std::string& name) const {
    return store.contains(name) ? &store.get(name) : nullptr;
  }
};

template <class T>
struct VarParams {
  std::map<std::string, Var<T>> vars;

  // Registers every stored tensor as a trainable leaf on the tape.
  static VarParams on_tape(Tape<T>& tape, const ParamStore<T>& store) {
    VarParams p;
    for (const auto& [name, t] : store) p.vars.emplace(name, tape.leaf(t, name));
    return p;
  }
  Var<T> operator()(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  std::optional<Var<T>> optional(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) return std::nullopt;
    return it->second;
  }
};

template <class V>
struct EncoderOutput {
  // Pre-pool features of each block, finest first.
  std::vector<V> lateral;
  V bottom;
};

template <class V>
struct SeuOutput {
  V output;
  V channel_weights;  // [N, C]
};

inline void check_input(const NetworkConfig& cfg, const Shape& s) {
  if (s.rank() != 4) throw ShapeError("network input must be N x C x H x W, got " + s.str());
  if (s[1] != cfg.input_channels)
    throw ShapeError("network expects " + std::to_string(cfg.input_channels) + " input channels, got " +
                     std::to_string(s[1]));
  const std::size_t m = cfg.spatial_multiple();
  if (s[2] % m || s[3] % m)
    throw ShapeError("input extents " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " must be divisible by " + std::to_string(m));
}

template <class Params, class V>
EncoderOutput<V> encoder_forward(const NetworkConfig& cfg, const Params& p, const V& image) {
  check_input(cfg, nn::shape_of(image));
  EncoderOutput<V> out;
  V x = image;
  for (std::size_t i = 0; i < cfg.levels(); ++i) {
    const auto a = encoder_prefix(i, 0), b = encoder_prefix(i, 1);
    x = nn::relu(nn::conv2d(x, p(a + ".weight"), p(a + ".bias"), nn::ConvSpec::same(3)));
    x = nn::relu(nn::conv2d(x, p(b + ".weight"), p(b + ".bias"), nn::ConvSpec::same(3)));
    out.lateral.push_back(x);
    x = nn::maxpool2x2(x);
  }
  out.bottom = std::move(x);
  return out;
}

// Dilated branches (one per rate), a global-context branch and the identity
// are concatenated, then fused by a 1x1 convolution.
template <class Params, class V>
V md_forward(const NetworkConfig& cfg, const Params& p, const V& x) {
  const Shape& s = nn::shape_of(x);
  if (s.rank() != 4 || s[1] != cfg.encoder_channels.back())
    throw ShapeError("MD module expects " + std::to_string(cfg.encoder_channels.back()) +
                     " input channels, got " + s.str());
  std::vector<V> branches;
  for (std::size_t b = 0; b < cfg.dilation_rates.size(); ++b) {
    const auto pre = md_dilated_prefix(b);
    branches.push_back(nn::relu(nn::conv2d(x, p(pre + ".weight"), p(pre + ".bias"),
                                           nn::ConvSpec::same(3, cfg.dilation_rates[b]))));
  }
  V g = nn::global_avg_pool(x);
  g = nn::relu(nn::conv2d(g, p("md.global.weight"), p("md.global.bias"), nn::ConvSpec{}));
  branches.push_back(nn::broadcast_spatial(g, s[2], s[3]));
  branches.push_back(x);
  const V cat = nn::concat_channels(branches);
  return nn::relu(nn::conv2d(cat, p("md.fuse.weight"), p("md.fuse.bias"), nn::ConvSpec{}));
}

// Upsample x2 with halved channels, add the lateral features, then reweight
// channels by squeeze-and-excitation.
template <class Params, class V>
SeuOutput<V> seu_forward(const NetworkConfig& cfg, const Params& p, std::size_t stage, const V& md,
                         const V& lateral) {
  if (stage >= cfg.levels()) throw ShapeError("SEU stage " + std::to_string(stage) + " does not exist");
  const std::string pre = decoder_prefix(stage);
  const Shape& ms = nn::shape_of(md);
  if (ms.rank() != 4 || ms[1] % 2)
    throw ShapeError("SEU module needs an even channel count, got " + ms.str());
  const Shape expected{ms[0], ms[1] / 2, 2 * ms[2], 2 * ms[3]};
  if (!(nn::shape_of(lateral) == expected))
    throw ShapeError("SEU stage " + std::to_string(stage) + ": lateral features " +
                     nn::shape_of(lateral).str() + ", expected " + expected.str());
  V up = nn::transposed_conv2d(md, p(pre + ".up.weight"), p.optional(pre + ".up.bias"));
  V sum = nn::add(up, lateral);
  const std::size_t n = expected[0], c = expected[1];
  V z = nn::reshape(nn::global_avg_pool(sum), Shape{n, c});
  z = nn::relu(nn::fully_connected(z, p(pre + ".squeeze.weight"), p(pre + ".squeeze.bias")));
  V w = nn::sigmoid(nn::fully_connected(z, p(pre + ".excite.weight"), p(pre + ".excite.bias")));
  return {nn::scale_channels(sum, w), w};
}

template <class Params, class V>
V decoder_forward(const NetworkConfig& cfg, const Params& p, const V& md,
                  const std::vector<V>& lateral) {
  V x = md;
  for (std::size_t s = 0; s < cfg.levels(); ++s)
    x = seu_forward(cfg, p, s, x, lateral[cfg.levels() - 1 - s]).output;
  return nn::sigmoid(nn::conv2d(x, p("head.weight"), p("head.bias"), nn::ConvSpec{}));
}

// Image [N,C,H,W] -> crack probability [N,1,H,W].
template <class Params, class V>
V fpcnet_forward(const NetworkConfig& cfg, const Params& p, const V& image) {
  auto enc = encoder_forward(cfg, p, image);
  V md = md_forward(cfg, p, enc.bottom);
  return decoder_forward(cfg, p, md, enc.lateral);
}

template <class T>
Tensor<T> predict(const NetworkConfig& cfg, const ParamStore<T>& params, const Tensor<T>& image) {
  return fpcnet_forward(cfg, TensorParams<T>{params}, image);
}

}  // namespace fpcnet
