#pragma once

// Command implementations for the fpcnet executable. Kept in a header so the
// tests can drive `run` in-process with captured streams.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <streambuf>
#include <string>
#include <vector>

#include "fpcnet/bench.hpp"
#include "fpcnet/checkpoint.hpp"
#include "fpcnet/config.hpp"
#include "fpcnet/data.hpp"
#include "fpcnet/image.hpp"
#include "fpcnet/metrics.hpp"
#include "fpcnet/model.hpp"
#include "fpcnet/training.hpp"
#include "fpcnet/verify/suites.hpp"

namespace fpcnet::cli {

namespace fs = std::filesystem;

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Shared flags; any unset optional leaves the config file value alone.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> tile;
  std::optional<double> threshold;
  std::optional<double> margin;
  std::string out;
  std::string model;
};

inline RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::from_file(c.config);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects section.key=value, got '" + s + "'");
    cfg.set(util::trim(std::string_view(s).substr(0, eq)), std::string_view(s).substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (c.tile) cfg.tile = *c.tile;
  if (c.threshold) cfg.threshold = *c.threshold;
  if (c.margin) cfg.margin = *c.margin;
  cfg.validate();
  return cfg;
}

inline fs::path require_out(const Common& c) {
  if (c.out.empty()) throw UsageError("--out DIR is required");
  fs::create_directories(c.out);
  return c.out;
}

inline void echo_config(const fs::path& dir, const RunConfig& cfg) {
  write_text_atomic(dir / "config.ini", "# resolved configuration\n" + cfg.to_text());
}

inline bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".pgm";
}

// Files are taken as given; directories contribute their images, sorted.
inline std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.is_regular_file() && is_image_file(e.path())) found.push_back(e.path());
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::exists(in)) {
      out.emplace_back(in);
    } else {
      throw DataError("input '" + in + "' does not exist");
    }
  }
  return out;
}

// Splits every sample into non-overlapping size x size tiles.
inline std::vector<Sample> tile_samples(const std::vector<Sample>& in, std::size_t size) {
  std::vector<Sample> out;
  for (const auto& s : in) {
    auto [g, im] = tile(s.image, size);
    auto [g2, mk] = tile(s.mask, size);
    for (std::size_t i = 0; i < im.size(); ++i)
      out.push_back({std::move(im[i].data), std::move(mk[i].data),
                     s.id + "@" + std::to_string(im[i].row) + "_" + std::to_string(im[i].col), s.crack_type});
  }
  return out;
}

inline std::string manifest_text(const std::vector<ManifestEntry>& es) {
  std::string s;
  for (const auto& e : es)
    s += fs::absolute(e.image).string() + "\t" + fs::absolute(e.mask).string() +
         (e.crack_type ? "\t" + *e.crack_type : "") + "\n";
  return s;
}

// Writes each line to two buffers (training log file and the console).
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int ch) override {
    if (ch == traits_type::eof()) return traits_type::not_eof(ch);
    const auto c = traits_type::to_char_type(ch);
    return a_->sputc(c) == traits_type::eof() || b_->sputc(c) == traits_type::eof() ? traits_type::eof() : ch;
  }
  int sync() override { return a_->pubsync() | b_->pubsync(); }

 private:
  std::streambuf *a_, *b_;
};

// ---------------------------------------------------------------------------

inline int cmd_train(const Common& c, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve(c);
  const fs::path dir = require_out(c);
  if (cfg.checkpoint.empty()) cfg.checkpoint = (dir / "model.fpck").string();

  Rng root(cfg.seed);
  Rng split_rng = root.fork(), train_rng = root.fork();
  std::vector<ManifestEntry> train_entries, test_entries;
  if (!cfg.train_manifest.empty()) {
    train_entries = read_manifest(cfg.train_manifest);
    if (!cfg.test_manifest.empty()) test_entries = read_manifest(cfg.test_manifest);
  } else if (!cfg.manifest.empty()) {
    std::optional<std::size_t> count;
    if (cfg.train_count) count = cfg.train_count;
    std::tie(train_entries, test_entries) = split_dataset(read_manifest(cfg.manifest), cfg.split, split_rng, count);
  } else {
    throw UsageError("train: set data.manifest or data.train_manifest");
  }
  write_text_atomic(dir / "train_manifest.tsv", manifest_text(train_entries));
  write_text_atomic(dir / "test_manifest.tsv", manifest_text(test_entries));

  auto data = load_dataset(train_entries, &err);
  for (auto& s : data) s.image = to_channels(s.image, cfg.network.input_channels);
  if (cfg.data_tile) data = tile_samples(data, cfg.data_tile);
  echo_config(dir, cfg);

  std::optional<ParamStore<float>> init;
  if (!c.model.empty()) {
    auto ck = load_checkpoint<float>(c.model);
    if (!(ck.config == cfg.network)) throw UsageError("train: --model network config differs from the run config");
    init = std::move(ck.params);
  }

  std::ofstream log(dir / "train.log");
  if (!log) throw DataError("cannot write '" + (dir / "train.log").string() + "'");
  TeeBuf tee(log.rdbuf(), out.rdbuf());
  std::ostream both(&tee);
  out << "training on " << data.size() << " samples (" << train_entries.size() << " images), "
      << test_entries.size() << " held out\n";
  const auto res = train<float>(cfg.network, cfg.train_options(), data, train_rng, &both, std::move(init));
  out << "wrote " << cfg.checkpoint << " after " << res.step_losses.size() << " steps\n";
  return kOk;
}

// Probability map for one image, tiled or whole.
inline TensorF predict_image(const NetworkConfig& net, const ParamStore<float>& params, const TensorF& x,
                             std::size_t tile_size) {
  if (!tile_size) return predict(net, params, x);
  return map_tiles(x, tile_size, [&](const TensorF& t) { return predict(net, params, t); });
}

inline Image8 render_overlay(const TensorF& image, const TensorF& prob, double high, double low) {
  Image8 im = tensor_to_image(to_channels(image, 3));
  for (std::size_t i = 0; i < prob.numel(); ++i) {
    const double p = prob[i];
    std::uint8_t* px = im.data.data() + 3 * i;
    if (p >= high) {
      px[0] = 255, px[1] = 0, px[2] = 0;
    } else if (p >= low) {
      px[0] = 0, px[1] = 0, px[2] = 255;
    }
  }
  return im;
}

inline Image8 mask_image(const Mask& m) {
  Image8 im(m.height, m.width, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) im.data[i] = m.data[i] ? 255 : 0;
  return im;
}

inline int cmd_predict(const Common& c, const std::vector<std::string>& inputs, const std::string& manifest,
                       std::ostream& out) {
  const RunConfig cfg = resolve(c);
  if (c.model.empty()) throw UsageError("predict: --model is required");
  const auto ck = load_checkpoint<float>(c.model);
  std::vector<fs::path> files = expand_inputs(inputs);
  if (!manifest.empty())
    for (const auto& e : read_manifest(manifest)) files.push_back(e.image);
  if (files.empty()) throw UsageError("predict: no input images");
  const fs::path dir = require_out(c);
  echo_config(dir, cfg);
  for (const auto& f : files) {
    const Image8 src = read_image(f);
    const TensorF x = to_channels(image_to_tensor<float>(src), ck.config.input_channels);
    const TensorF prob = predict_image(ck.config, ck.params, x, cfg.tile);
    // Render everything before touching the disk.
    const auto prob_png = encode_png(tensor_to_image(prob));
    const auto mask_png = encode_png(mask_image(binarize(prob, cfg.threshold)));
    const auto overlay_png =
        encode_png(render_overlay(image_to_tensor<float>(src), prob, cfg.threshold, cfg.overlay_low));
    const std::string stem = f.stem().string();
    write_file_atomic(dir / (stem + "_prob.png"), prob_png);
    write_file_atomic(dir / (stem + "_mask.png"), mask_png);
    write_file_atomic(dir / (stem + "_overlay.png"), overlay_png);
    out << f.string() << " -> " << (dir / (stem + "_prob.png")).string() << '\n';
  }
  return kOk;
}

// Prediction for ground-truth stem X: X_mask.png, X.png, else X_prob.png thresholded.
inline Mask load_prediction(const fs::path& pred_dir, const std::string& stem, double threshold) {
  for (const char* suffix : {"_mask.png", ".png", ".pgm"}) {
    const auto p = pred_dir / (stem + suffix);
    if (fs::exists(p)) {
      const Image8 im = read_image(p);
      return mask_from_tensor(mask_from_image(im, p.string(), nullptr));
    }
  }
  const auto p = pred_dir / (stem + "_prob.png");
  if (fs::exists(p)) return binarize(image_to_tensor<double>(read_image(p)), threshold);
  throw DataError("no prediction for '" + stem + "' in '" + pred_dir.string() + "'");
}

inline int cmd_eval(const Common& c, const std::string& pred_dir, const std::string& gt_dir,
                    const std::string& manifest, const std::string& from_rates, std::ostream& out,
                    std::ostream& err) {
  if (!from_rates.empty()) {
    const auto parts = util::split(from_rates, ',');
    if (parts.size() != 2) throw UsageError("--from-rates expects P,R");
    const double p = util::parse_double(parts[0], "precision"), r = util::parse_double(parts[1], "recall");
    if (!(p >= 0 && p <= 1 && r >= 0 && r <= 1)) throw UsageError("--from-rates: P and R must be in [0,1]");
    out << std::fixed << std::setprecision(6) << "precision " << p << "\nrecall " << r << "\nf1 "
        << f1_from_rates(p, r) << '\n';
    return kOk;
  }
  const RunConfig cfg = resolve(c);
  if (pred_dir.empty()) throw UsageError("eval: prediction directory is required");

  // (stem, gt path, type)
  struct Item {
    std::string stem;
    fs::path gt;
    std::optional<std::string> type;
  };
  std::vector<Item> items;
  if (!manifest.empty()) {
    for (const auto& e : read_manifest(manifest)) items.push_back({e.image.stem().string(), e.mask, e.crack_type});
  } else {
    if (gt_dir.empty()) throw UsageError("eval: give a ground-truth directory or --manifest");
    for (const auto& p : expand_inputs({gt_dir})) items.push_back({p.stem().string(), p, std::nullopt});
    if (!cfg.types.empty()) {
      std::map<std::string, std::optional<std::string>> types;
      for (const auto& e : read_manifest(cfg.types)) {
        types[e.image.stem().string()] = e.crack_type;
        types[e.mask.stem().string()] = e.crack_type;
      }
      for (auto& it : items)
        if (auto f = types.find(it.stem); f != types.end()) it.type = f->second;
    }
  }
  if (items.empty()) throw DataError("eval: no ground-truth masks found");

  std::vector<std::pair<std::string, EvalReport>> per_image;
  std::vector<TaggedCounts> tagged;
  EvalCounts all;
  bool typed = true;
  for (const auto& it : items) {
    const Mask gt = mask_from_tensor(mask_from_image(read_image(it.gt), it.gt.string(), &err));
    const Mask pred = load_prediction(pred_dir, it.stem, cfg.threshold);
    const auto counts = evaluate_counts(pred, gt, cfg.margin);
    per_image.emplace_back(it.stem, EvalReport::from_counts(counts, cfg.margin));
    all += counts;
    if (it.type) tagged.push_back({*it.type, counts});
    else typed = false;
  }
  std::vector<std::pair<std::string, EvalReport>> rows;
  if (typed) rows = group_report(tagged, cfg.margin).rows;
  rows.emplace_back("overall", EvalReport::from_counts(all, cfg.margin));
  write_report_table(out, rows);
  if (!c.out.empty()) {
    const fs::path dir = require_out(c);
    std::ostringstream a, b;
    write_report_csv(a, rows);
    write_report_csv(b, per_image);
    write_text_atomic(dir / "report.csv", a.str());
    write_text_atomic(dir / "per_image.csv", b.str());
    echo_config(dir, cfg);
  }
  return kOk;
}

inline std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  const auto x = s.find_first_of("xX");
  if (x == std::string::npos) throw UsageError("--size expects WxH, got '" + s + "'");
  return {util::parse_int<std::size_t>(s.substr(0, x), "--size width"),
          util::parse_int<std::size_t>(s.substr(x + 1), "--size height")};
}

inline int cmd_bench(const Common& c, const std::string& size, std::size_t repeats, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const auto [w, h] = parse_size(size);
  NetworkConfig net = cfg.network;
  ParamStore<float> params;
  Rng rng(cfg.seed);
  if (!c.model.empty()) {
    auto ck = load_checkpoint<float>(c.model);
    net = ck.config;
    params = std::move(ck.params);
  } else {
    params = init_parameters<float>(net, rng);
  }
  Image8 im(h, w, net.input_channels);
  for (auto& v : im.data) v = static_cast<std::uint8_t>(rng.uniform_index(0, 255));
  const auto r = bench(net, params, im, repeats, 3, cfg.threshold);
  write_bench_table(out, r);
  if (!c.out.empty()) {
    const fs::path dir = require_out(c);
    std::ostringstream os;
    write_bench_table(os, r);
    write_text_atomic(dir / "bench.tsv", os.str());
    echo_config(dir, cfg);
  }
  return kOk;
}

inline int cmd_selfcheck(std::size_t seeds, std::ostream& out) {
  verify::SelfcheckOptions opt;
  opt.gradient_seeds = opt.network_seeds = seeds;
  bool ok = true;
  for (const auto& r : verify::selfcheck(opt)) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << "  " << r.detail << '\n';
    ok = ok && r.passed;
  }
  out << (ok ? "selfcheck passed\n" : "selfcheck FAILED\n");
  return ok ? kOk : kNumerical;
}

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"FPCNet crack segmentation: train, predict, eval, bench, selfcheck", "fpcnet"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", c.config, "INI run configuration");
    s->add_option("--set", c.sets, "override, section.key=value (repeatable)");
    s->add_option("--seed", c.seed, "random seed");
    s->add_option("--out", c.out, "output directory");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model from a manifest");
  add_common(train_cmd);
  train_cmd->add_option("--model", c.model, "checkpoint to continue from");

  std::vector<std::string> inputs;
  std::string manifest;
  auto* predict_cmd = app.add_subcommand("predict", "write probability maps, masks and overlays");
  add_common(predict_cmd);
  predict_cmd->add_option("--model", c.model, "checkpoint")->required();
  predict_cmd->add_option("--tile", c.tile, "tile size (0: whole image)");
  predict_cmd->add_option("--threshold", c.threshold, "mask threshold");
  predict_cmd->add_option("--manifest", manifest, "predict the images listed in a manifest");
  predict_cmd->add_option("inputs", inputs, "image files or directories");

  std::string pred_dir, gt_dir, from_rates;
  auto* eval_cmd = app.add_subcommand("eval", "precision, recall and F1 within a tolerance margin");
  add_common(eval_cmd);
  eval_cmd->add_option("--margin", c.margin, "tolerance margin in pixels");
  eval_cmd->add_option("--threshold", c.threshold, "threshold for *_prob.png predictions");
  eval_cmd->add_option("--manifest", manifest, "ground truth and crack types from a manifest");
  eval_cmd->add_option("--from-rates", from_rates, "print F1 for a precision,recall pair and exit");
  eval_cmd->add_option("pred", pred_dir, "prediction directory");
  eval_cmd->add_option("gt", gt_dir, "ground-truth mask directory");

  std::string size = "480x320";
  std::size_t repeats = 10;
  auto* bench_cmd = app.add_subcommand("bench", "per-stage timing");
  add_common(bench_cmd);
  bench_cmd->add_option("--model", c.model, "checkpoint (default: freshly initialized network)");
  bench_cmd->add_option("--size", size, "input size WxH");
  bench_cmd->add_option("--repeat", repeats, "timed runs after 3 warm-ups")->check(CLI::PositiveNumber);

  std::size_t seeds = 20;
  auto* self_cmd = app.add_subcommand("selfcheck", "gradient checks and oracle suites");
  self_cmd->add_option("--seeds", seeds, "random seeds per gradient suite")->check(CLI::PositiveNumber);

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  try {
    if (*train_cmd) return cmd_train(c, out, err);
    if (*predict_cmd) return cmd_predict(c, inputs, manifest, out);
    if (*eval_cmd) return cmd_eval(c, pred_dir, gt_dir, manifest, from_rates, out, err);
    if (*bench_cmd) return cmd_bench(c, size, repeats, out);
    return cmd_selfcheck(seeds, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    // Data, format and shape problems, plus filesystem failures.
    err << "error: " << e.what() << '\n';
    return kData;
  }
}

}  // namespace fpcnet::cli
