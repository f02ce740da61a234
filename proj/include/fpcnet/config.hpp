#pragma once

// Run configuration: INI-style "[section]" headers and key=value lines.
// Every key lives in exactly one section; overrides use "section.key=value".

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fpcnet/data.hpp"
#include "fpcnet/io.hpp"
#include "fpcnet/model.hpp"
#include "fpcnet/training.hpp"
#include "fpcnet/util.hpp"

namespace fpcnet {

struct RunConfig {
  std::uint64_t seed = 0;

  NetworkConfig network;
  AugmentConfig augment;
  bool augment_enabled = true;
  Schedule schedule;
  SgdConfig sgd;

  // [train]
  std::size_t batch_size = 1;
  std::size_t checkpoint_every = 0;
  std::size_t max_steps = 0;
  std::string checkpoint;  // output path; empty means <out>/model.fpck

  // [data] Either one manifest split by `split`, or explicit train/test manifests.
  std::string manifest;
  std::string train_manifest;
  std::string test_manifest;
  double split = 0.6;
  std::size_t train_count = 0;  // overrides `split` when nonzero
  std::size_t data_tile = 0;    // cut training images into non-overlapping tiles first

  // [predict]
  std::size_t tile = 0;  // 0: whole image
  double threshold = 0.5;
  double overlay_low = 0.05;

  // [eval]
  double margin = 2.0;
  std::string types;  // optional manifest carrying crack-type tags

  void set(std::string_view dotted, std::string_view value);
  std::string get(std::string_view dotted) const;
  std::string to_text() const;
  void validate() const;

  static RunConfig from_text(std::string_view text, const std::filesystem::path& base = {});
  static RunConfig from_file(const std::filesystem::path& path);

  TrainOptions train_options() const {
    TrainOptions o;
    o.schedule = schedule;
    o.sgd = sgd;
    o.augment = augment;
    o.augment_enabled = augment_enabled;
    o.batch_size = batch_size;
    o.checkpoint_every = checkpoint_every;
    o.checkpoint_path = checkpoint;
    o.max_steps = max_steps;
    return o;
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace config_detail {

struct Key {
  std::string name;  // "section.key"; top-level keys have no dot
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
  bool is_path = false;
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class M>
Key size_key(std::string name, M member) {
  return {name, [=](const RunConfig& c) { return std::to_string(c.*member); },
          [=](RunConfig& c, std::string_view v) { c.*member = util::parse_int<std::size_t>(v, name); }};
}
template <class M>
Key double_key(std::string name, M member) {
  return {name, [=](const RunConfig& c) { return fmt(c.*member); },
          [=](RunConfig& c, std::string_view v) { c.*member = util::parse_double(v, name); }};
}
template <class M>
Key string_key(std::string name, M member, bool is_path = true) {
  return {name, [=](const RunConfig& c) { return c.*member; },
          [=](RunConfig& c, std::string_view v) { c.*member = std::string(v); }, is_path};
}

// Network settings delegate to NetworkConfig's own parser.
inline Key network_key(const std::string& key) {
  return {"network." + key,
          [=](const RunConfig& c) {
            for (const auto& line : util::split(c.network.to_text(), '\n')) {
              const auto eq = line.find('=');
              if (eq != std::string::npos && line.substr(0, eq) == key) return line.substr(eq + 1);
            }
            return std::string();
          },
          [=](RunConfig& c, std::string_view v) { c.network.set(key, v); }};
}

template <class M>
Key aug_bool(std::string name, M member) {
  return {"augment." + name, [=](const RunConfig& c) { return std::string(c.augment.*member ? "1" : "0"); },
          [=](RunConfig& c, std::string_view v) { c.augment.*member = util::parse_bool(v, name); }};
}
template <class M>
Key aug_double(std::string name, M member) {
  return {"augment." + name, [=](const RunConfig& c) { return fmt(c.augment.*member); },
          [=](RunConfig& c, std::string_view v) { c.augment.*member = util::parse_double(v, name); }};
}

inline const std::vector<Key>& keys() {
  static const std::vector<Key> k = [] {
    std::vector<Key> v;
    v.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, std::string_view s) { c.seed = util::parse_int<std::uint64_t>(s, "seed"); }});
    for (auto n : {"input_channels", "encoder_channels", "md_output_channels", "decoder_channels", "dilation_rates",
                   "se_reduction", "transposed_bias"})
      v.push_back(network_key(n));
    v.push_back({"augment.enabled", [](const RunConfig& c) { return std::string(c.augment_enabled ? "1" : "0"); },
                 [](RunConfig& c, std::string_view s) { c.augment_enabled = util::parse_bool(s, "augment.enabled"); }});
    v.push_back(aug_bool("rot90", &AugmentConfig::rot90));
    v.push_back(aug_bool("rot180", &AugmentConfig::rot180));
    v.push_back(aug_bool("hflip", &AugmentConfig::hflip));
    v.push_back(aug_bool("jitter", &AugmentConfig::jitter));
    v.push_back(aug_double("brightness", &AugmentConfig::brightness));
    v.push_back(aug_double("contrast", &AugmentConfig::contrast));
    v.push_back(aug_double("saturation", &AugmentConfig::saturation));
    v.push_back(aug_double("probability", &AugmentConfig::probability));
    v.push_back({"augment.crop", [](const RunConfig& c) { return std::to_string(c.augment.crop); },
                 [](RunConfig& c, std::string_view s) { c.augment.crop = util::parse_int<std::size_t>(s, "crop"); }});
    v.push_back({"schedule.base_lr", [](const RunConfig& c) { return fmt(c.schedule.base_lr); },
                 [](RunConfig& c, std::string_view s) { c.schedule.base_lr = util::parse_double(s, "base_lr"); }});
    v.push_back({"schedule.factor", [](const RunConfig& c) { return fmt(c.schedule.factor); },
                 [](RunConfig& c, std::string_view s) { c.schedule.factor = util::parse_double(s, "factor"); }});
    v.push_back({"schedule.milestones", [](const RunConfig& c) { return util::join(c.schedule.milestones); },
                 [](RunConfig& c, std::string_view s) {
                   c.schedule.milestones = util::parse_size_list(s, "milestones");
                 }});
    v.push_back({"schedule.epochs", [](const RunConfig& c) { return std::to_string(c.schedule.epochs); },
                 [](RunConfig& c, std::string_view s) {
                   c.schedule.epochs = util::parse_int<std::size_t>(s, "epochs");
                 }});
    v.push_back({"optimizer.momentum", [](const RunConfig& c) { return fmt(c.sgd.momentum); },
                 [](RunConfig& c, std::string_view s) { c.sgd.momentum = util::parse_double(s, "momentum"); }});
    v.push_back({"optimizer.weight_decay", [](const RunConfig& c) { return fmt(c.sgd.weight_decay); },
                 [](RunConfig& c, std::string_view s) {
                   c.sgd.weight_decay = util::parse_double(s, "weight_decay");
                 }});
    v.push_back(size_key("train.batch_size", &RunConfig::batch_size));
    v.push_back(size_key("train.checkpoint_every", &RunConfig::checkpoint_every));
    v.push_back(size_key("train.max_steps", &RunConfig::max_steps));
    v.push_back(string_key("train.checkpoint", &RunConfig::checkpoint));
    v.push_back(string_key("data.manifest", &RunConfig::manifest));
    v.push_back(string_key("data.train_manifest", &RunConfig::train_manifest));
    v.push_back(string_key("data.test_manifest", &RunConfig::test_manifest));
    v.push_back(double_key("data.split", &RunConfig::split));
    v.push_back(size_key("data.train_count", &RunConfig::train_count));
    v.push_back(size_key("data.tile", &RunConfig::data_tile));
    v.push_back(size_key("predict.tile", &RunConfig::tile));
    v.push_back(double_key("predict.threshold", &RunConfig::threshold));
    v.push_back(double_key("predict.overlay_low", &RunConfig::overlay_low));
    v.push_back(double_key("eval.margin", &RunConfig::margin));
    v.push_back(string_key("eval.types", &RunConfig::types));
    return v;
  }();
  return k;
}

inline const Key& find(std::string_view dotted) {
  for (const auto& k : keys())
    if (k.name == dotted) return k;
  throw UsageError("config: unknown key '" + std::string(dotted) + "'");
}

}  // namespace config_detail

inline void RunConfig::set(std::string_view dotted, std::string_view value) {
  config_detail::find(dotted).set(*this, util::trim(value));
}

inline std::string RunConfig::get(std::string_view dotted) const { return config_detail::find(dotted).get(*this); }

inline std::string RunConfig::to_text() const {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_detail::keys()) {
    const auto dot = k.name.find('.');
    const std::string sec = dot == std::string::npos ? "" : k.name.substr(0, dot);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << (dot == std::string::npos ? k.name : k.name.substr(dot + 1)) << " = " << k.get(*this) << '\n';
  }
  return os.str();
}

inline void RunConfig::validate() const {
  network.validate();
  augment.validate();
  schedule.validate();
  if (batch_size == 0) throw UsageError("config: train.batch_size must be positive");
  if (!(split > 0.0 && split < 1.0)) throw UsageError("config: data.split must be in (0,1)");
  if (!(threshold > 0.0 && threshold < 1.0)) throw UsageError("config: predict.threshold must be in (0,1)");
  if (!(overlay_low >= 0.0 && overlay_low <= threshold))
    throw UsageError("config: predict.overlay_low must be in [0, threshold]");
  if (!(margin >= 0.0)) throw UsageError("config: eval.margin must be non-negative");
  if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) throw UsageError("config: optimizer.momentum must be in [0,1)");
  if (!(sgd.weight_decay >= 0.0)) throw UsageError("config: optimizer.weight_decay must be non-negative");
  for (auto t : {tile, data_tile})
    if (t && t % network.spatial_multiple())
      throw UsageError("config: tile sizes must be multiples of " + std::to_string(network.spatial_multiple()));
}

// Relative paths in a file resolve against `base` (the file's directory).
inline RunConfig RunConfig::from_text(std::string_view text, const std::filesystem::path& base) {
  RunConfig c;
  std::string section;
  std::size_t n = 0;
  for (const auto& raw : util::split(text, '\n')) {
    ++n;
    auto line = util::trim(raw);
    if (const auto hash = line.find_first_of("#;"); hash != std::string_view::npos)
      line = util::trim(line.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(n) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw UsageError(where + "malformed section header");
      section = std::string(util::trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw UsageError(where + "expected key = value");
    const std::string key(util::trim(line.substr(0, eq)));
    const std::string dotted = section.empty() ? key : section + "." + key;
    std::string value(util::trim(line.substr(eq + 1)));
    try {
      const auto& k = config_detail::find(dotted);
      if (k.is_path && !value.empty() && !base.empty() && std::filesystem::path(value).is_relative())
        value = (base / value).lexically_normal().string();
      k.set(c, value);
    } catch (const UsageError& e) {
      throw UsageError(where + e.what());
    }
  }
  return c;
}

inline RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  return from_text(read_text(path), path.parent_path());
}

}  // namespace fpcnet
