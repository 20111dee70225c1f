#pragma once

// Command-line front end. Kept in a header so the tests can drive it
// in-process; main.cpp only forwards argv.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "firescan/firescan.hpp"

namespace firescan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kConfig = 2, kData = 3, kRuntime = 4 };

inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::config:
    case ErrorCode::syntax:
    case ErrorCode::invalid_argument: return kConfig;
    case ErrorCode::state: return kRuntime;
    default: return kData;
  }
}

struct SyntheticConfig {
  std::size_t scenes = 8;
  std::size_t height = 512;
  std::size_t width = 512;
  std::size_t n_fires = 8;
  std::optional<double> fire_fraction;
  double fire_radius_min = 4.0;
  double fire_radius_max = 14.0;
  double smoke_opacity = 1.0;
  double test_fraction = 0.25;
};

struct RunConfig {
  std::uint64_t seed = 0;
  fs::path out = "firescan_out";
  std::string channels = "1-12";
  double threshold = 0.5;
  double rate = 1.0;
  bool quiet = false;
  PreprocessConfig preprocess;
  std::optional<fs::path> manifest;
  std::optional<fs::path> patches;
  std::size_t patch_size = kPatchSize;
  double min_fire_fraction = LabelRule{}.min_fire_fraction;
  SyntheticConfig synthetic;
  TrainConfig classifier = TrainConfig::classifier_defaults();
  TrainConfig segmenter = TrainConfig::segmenter_defaults();
  bool gate = true;
  std::size_t queue_depth = 4;
  bool threaded = true;
  std::string subsets = "1-12;11,9,2;10,9,2;9;10;11;12;1-8;5,3,2";
  std::size_t seeds = 3;
  std::vector<std::string> networks{"classifier"};
  std::size_t bench_count = 50;
  std::size_t bench_warmup = 3;
  std::string rule{kSchroederRule};
  BandMapping mapping = schroeder_ams_mapping();

  fs::path patches_dir() const { return patches ? *patches : out / "patches"; }
};

// ---- config document ---------------------------------------------------

namespace detail {

inline void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  require(j.is_object(), ErrorCode::config, where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    require(std::any_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }), ErrorCode::config,
            "unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::config, std::string("bad value for '") + key + "' in " + where);
  }
}

inline void read_path(const json& j, const char* key, fs::path& dst, const fs::path& base, const std::string& where) {
  if (!j.contains(key)) return;
  std::string s;
  read(j, key, s, where);
  dst = fs::path(s).is_relative() ? base / s : fs::path(s);
}

inline void read_train(const json& j, TrainConfig& c, const std::string& where) {
  only_keys(j, {"lr", "epochs", "batch_size", "positive_weight", "val_fraction", "target_metric", "patience"}, where);
  read(j, "lr", c.lr, where);
  read(j, "epochs", c.epochs, where);
  read(j, "batch_size", c.batch_size, where);
  read(j, "positive_weight", c.positive_weight, where);
  read(j, "val_fraction", c.val_fraction, where);
  if (j.contains("target_metric")) {
    double v = 0;
    read(j, "target_metric", v, where);
    c.target_metric = v;
  }
  read(j, "patience", c.patience, where);
}

inline json train_json(const TrainConfig& c) {
  json j{{"lr", c.lr},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"positive_weight", c.positive_weight},
         {"val_fraction", c.val_fraction},
         {"patience", c.patience}};
  if (c.target_metric) j["target_metric"] = *c.target_metric;
  return j;
}

}  // namespace detail

// Relative paths in the document resolve against `base` (the config file's
// directory).
inline RunConfig parse_config(const json& j, const fs::path& base = {}) {
  using detail::only_keys;
  using detail::read;
  RunConfig c;
  only_keys(j,
            {"seed", "out", "channels", "threshold", "rate", "quiet", "preprocess", "dataset", "synthetic",
             "classifier", "segmenter", "two_tier", "feed", "ablation", "bench", "rule"},
            "config");
  read(j, "seed", c.seed, "config");
  detail::read_path(j, "out", c.out, base, "config");
  read(j, "channels", c.channels, "config");
  read(j, "threshold", c.threshold, "config");
  read(j, "rate", c.rate, "config");
  read(j, "quiet", c.quiet, "config");
  if (j.contains("preprocess")) {
    const auto& p = j["preprocess"];
    only_keys(p, {"target_gsd_m", "thermal_clip_lo_k", "thermal_clip_hi_k"}, "preprocess");
    read(p, "target_gsd_m", c.preprocess.target_gsd_m, "preprocess");
    read(p, "thermal_clip_lo_k", c.preprocess.thermal_clip_lo_k, "preprocess");
    read(p, "thermal_clip_hi_k", c.preprocess.thermal_clip_hi_k, "preprocess");
  }
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    only_keys(d, {"manifest", "patches", "patch_size", "min_fire_fraction"}, "dataset");
    if (d.contains("manifest")) {
      fs::path p;
      detail::read_path(d, "manifest", p, base, "dataset");
      c.manifest = p;
    }
    if (d.contains("patches")) {
      fs::path p;
      detail::read_path(d, "patches", p, base, "dataset");
      c.patches = p;
    }
    read(d, "patch_size", c.patch_size, "dataset");
    read(d, "min_fire_fraction", c.min_fire_fraction, "dataset");
  }
  if (j.contains("synthetic")) {
    const auto& s = j["synthetic"];
    only_keys(s,
              {"scenes", "height", "width", "n_fires", "fire_fraction", "fire_radius_min", "fire_radius_max",
               "smoke_opacity", "test_fraction"},
              "synthetic");
    auto& y = c.synthetic;
    read(s, "scenes", y.scenes, "synthetic");
    read(s, "height", y.height, "synthetic");
    read(s, "width", y.width, "synthetic");
    read(s, "n_fires", y.n_fires, "synthetic");
    if (s.contains("fire_fraction")) {
      double v = 0;
      read(s, "fire_fraction", v, "synthetic");
      y.fire_fraction = v;
    }
    read(s, "fire_radius_min", y.fire_radius_min, "synthetic");
    read(s, "fire_radius_max", y.fire_radius_max, "synthetic");
    read(s, "smoke_opacity", y.smoke_opacity, "synthetic");
    read(s, "test_fraction", y.test_fraction, "synthetic");
  }
  if (j.contains("classifier")) detail::read_train(j["classifier"], c.classifier, "classifier");
  if (j.contains("segmenter")) detail::read_train(j["segmenter"], c.segmenter, "segmenter");
  if (j.contains("two_tier")) {
    only_keys(j["two_tier"], {"gate"}, "two_tier");
    read(j["two_tier"], "gate", c.gate, "two_tier");
  }
  if (j.contains("feed")) {
    only_keys(j["feed"], {"queue_depth", "threaded"}, "feed");
    read(j["feed"], "queue_depth", c.queue_depth, "feed");
    read(j["feed"], "threaded", c.threaded, "feed");
  }
  if (j.contains("ablation")) {
    only_keys(j["ablation"], {"subsets", "seeds", "networks"}, "ablation");
    read(j["ablation"], "subsets", c.subsets, "ablation");
    read(j["ablation"], "seeds", c.seeds, "ablation");
    read(j["ablation"], "networks", c.networks, "ablation");
  }
  if (j.contains("bench")) {
    only_keys(j["bench"], {"count", "warmup"}, "bench");
    read(j["bench"], "count", c.bench_count, "bench");
    read(j["bench"], "warmup", c.bench_warmup, "bench");
  }
  if (j.contains("rule")) {
    only_keys(j["rule"], {"expr", "mapping"}, "rule");
    read(j["rule"], "expr", c.rule, "rule");
    if (j["rule"].contains("mapping")) c.mapping = parse_band_mapping(j["rule"]["mapping"]);
  }
  return c;
}

inline json config_json(const RunConfig& c) {
  json mapping = json::object();
  for (const auto& [k, v] : c.mapping) mapping[std::to_string(k)] = v;
  json dataset{{"patch_size", c.patch_size}, {"min_fire_fraction", c.min_fire_fraction}};
  if (c.manifest) dataset["manifest"] = c.manifest->string();
  if (c.patches) dataset["patches"] = c.patches->string();
  json synth{{"scenes", c.synthetic.scenes},
             {"height", c.synthetic.height},
             {"width", c.synthetic.width},
             {"n_fires", c.synthetic.n_fires},
             {"fire_radius_min", c.synthetic.fire_radius_min},
             {"fire_radius_max", c.synthetic.fire_radius_max},
             {"smoke_opacity", c.synthetic.smoke_opacity},
             {"test_fraction", c.synthetic.test_fraction}};
  if (c.synthetic.fire_fraction) synth["fire_fraction"] = *c.synthetic.fire_fraction;
  return {{"seed", c.seed},
          {"out", c.out.string()},
          {"channels", c.channels},
          {"threshold", c.threshold},
          {"rate", c.rate},
          {"quiet", c.quiet},
          {"preprocess",
           {{"target_gsd_m", c.preprocess.target_gsd_m},
            {"thermal_clip_lo_k", c.preprocess.thermal_clip_lo_k},
            {"thermal_clip_hi_k", c.preprocess.thermal_clip_hi_k}}},
          {"dataset", dataset},
          {"synthetic", synth},
          {"classifier", detail::train_json(c.classifier)},
          {"segmenter", detail::train_json(c.segmenter)},
          {"two_tier", {{"gate", c.gate}}},
          {"feed", {{"queue_depth", c.queue_depth}, {"threaded", c.threaded}}},
          {"ablation", {{"subsets", c.subsets}, {"seeds", c.seeds}, {"networks", c.networks}}},
          {"bench", {{"count", c.bench_count}, {"warmup", c.bench_warmup}}},
          {"rule", {{"expr", c.rule}, {"mapping", mapping}}}};
}

inline RunConfig load_config(const fs::path& path) {
  require(fs::exists(path), ErrorCode::config, "config file not found: " + path.string());
  std::ifstream is(path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j, path.parent_path());
}

inline void validate(const RunConfig& c) {
  validate(c.preprocess);
  validate(c.classifier);
  validate(c.segmenter);
  parse_band_list(c.channels);
  require(c.threshold >= 0 && c.threshold < 1, ErrorCode::config, "threshold must be in [0,1)");
  require(c.rate > 0 && std::isfinite(c.rate), ErrorCode::config, "rate must be > 0");
  require(c.patch_size >= 8 && c.patch_size % 8 == 0, ErrorCode::config, "patch_size must be a positive multiple of 8");
  require(c.queue_depth >= 1, ErrorCode::config, "queue_depth must be >= 1");
  require(c.seeds >= 1, ErrorCode::config, "ablation needs at least one seed");
  require(c.bench_count >= 1 && c.bench_warmup >= 1, ErrorCode::config, "bench count and warmup must be >= 1");
  require(c.synthetic.scenes >= 1, ErrorCode::config, "synthetic.scenes must be >= 1");
  require(c.synthetic.test_fraction >= 0 && c.synthetic.test_fraction < 1, ErrorCode::config,
          "synthetic.test_fraction must be in [0,1)");
  for (const auto& n : c.networks) network_kind_from_string(n);
  if (c.manifest) require(fs::exists(*c.manifest), ErrorCode::config, "manifest not found: " + c.manifest->string());
  parse_rule(c.rule);
}

// ---- commands ----------------------------------------------------------

struct Context {
  RunConfig cfg;
  std::ostream& out;
  std::optional<fs::path> classifier_ckpt;
  std::optional<fs::path> segmenter_ckpt;

  std::ostream& log() {
    static std::ostream null(nullptr);
    return cfg.quiet ? null : out;
  }
  fs::path cls_path() const { return classifier_ckpt ? *classifier_ckpt : cfg.out / "classifier.ckpt"; }
  fs::path seg_path() const { return segmenter_ckpt ? *segmenter_ckpt : cfg.out / "segmenter.ckpt"; }
  std::vector<int> bands() const { return parse_band_list(cfg.channels); }
};

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorCode::io, "cannot write " + path.string());
  os << text;
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string pct(const std::optional<double>& v) {
  if (!v) return "   n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << std::setw(6) << 100.0 * *v;
  return os.str();
}

inline void print_reports(std::ostream& os, const std::vector<EvalReport>& rows) {
  os << std::left << std::setw(16) << "method" << std::right << "   acc%  prec%   rec%   iou%   ms/patch\n";
  for (const auto& r : rows)
    os << std::left << std::setw(16) << r.method << std::right << ' ' << pct(r.metrics.accuracy) << ' '
       << pct(r.metrics.precision) << ' ' << pct(r.metrics.recall) << ' ' << pct(r.metrics.iou) << "   " << std::fixed
       << std::setprecision(3) << r.mean_inference_ms << '\n';
}

inline void write_reports(const fs::path& stem, const std::vector<EvalReport>& rows) {
  write_text(fs::path(stem.string() + ".csv"), reports_csv(rows));
  json j = json::array();
  for (const auto& r : rows) j.push_back(report_json(r));
  write_json(fs::path(stem.string() + ".json"), j);
}

inline std::vector<DatasetSplit> load_patches(const Context& ctx) { return read_patch_set(ctx.cfg.patches_dir()); }

inline DatasetSplit require_split(const std::vector<DatasetSplit>& splits, SplitKind kind) {
  auto s = find_split(splits, kind);
  require(!s.patches.empty(), ErrorCode::data, "patch set has no " + to_string(kind) + " patches");
  return s;
}

inline TwoTier load_model(const Context& ctx) {
  return TwoTier::load(ctx.cls_path(), ctx.seg_path(), {ctx.cfg.threshold, ctx.cfg.gate});
}

inline std::vector<ManifestEntry> synthesize_scenes(Context& ctx) {
  const auto& y = ctx.cfg.synthetic;
  const fs::path dir = ctx.cfg.out / "scenes";
  fs::create_directories(dir);
  const auto n_test = static_cast<std::size_t>(std::llround(y.test_fraction * static_cast<double>(y.scenes)));
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < y.scenes; ++i) {
    SceneSpec s;
    s.height = y.height;
    s.width = y.width;
    s.n_fires = y.n_fires;
    s.fire_fraction = y.fire_fraction;
    s.fire_radius_min = y.fire_radius_min;
    s.fire_radius_max = y.fire_radius_max;
    s.smoke_opacity = y.smoke_opacity;
    s.texture_seed = ctx.cfg.seed;
    s.thermal = ctx.cfg.preprocess;
    const auto scene = generate_scene(s, mix_seed(ctx.cfg.seed, 500 + i));
    const std::string name = "scene_" + std::to_string(i);
    write_raster(scene.image, dir / (name + ".msr"));
    write_mask(scene.mask, dir / (name + ".mask"));
    entries.push_back({name + ".msr", name + ".mask", i + n_test >= y.scenes ? SplitKind::test : SplitKind::train});
  }
  write_json(dir / "manifest.json", manifest_json(entries));
  for (auto& e : entries) {
    e.raster = dir / e.raster;
    e.mask = dir / e.mask;
  }
  return entries;
}

inline int cmd_prepare(Context& ctx, bool synthetic) {
  const auto& cfg = ctx.cfg;
  std::vector<ManifestEntry> entries;
  if (synthetic) {
    entries = synthesize_scenes(ctx);
  } else {
    require(cfg.manifest.has_value(), ErrorCode::config, "prepare needs --manifest, dataset.manifest or --synthetic");
    std::ifstream is(*cfg.manifest);
    require(static_cast<bool>(is), ErrorCode::io, "cannot read manifest " + cfg.manifest->string());
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::data, std::string("manifest is not valid JSON: ") + e.what());
    }
    entries = parse_manifest(j, cfg.manifest->parent_path());
  }
  require(!entries.empty(), ErrorCode::data, "manifest lists no images");

  DatasetSplit train_split, test_split;
  train_split.split = SplitKind::train;
  test_split.split = SplitKind::test;
  train_split.rng_seed = test_split.rng_seed = cfg.seed;
  const LabelRule rule{cfg.min_fire_fraction};
  for (const auto& e : entries) {
    RasterImage image = read_raster(e.raster);
    MaskImage mask = read_mask(e.mask);
    require(mask.height == image.height && mask.width == image.width, ErrorCode::data,
            "mask and raster dimensions differ for " + e.raster.string());
    const double gsd = image.gsd_m;
    image = image.units_state == UnitsState::normalized ? resample_to_gsd(image, cfg.preprocess)
                                                        : preprocess_image(image, cfg.preprocess);
    mask = resample_mask(mask, gsd, cfg.preprocess);
    auto tiles = grid_patches(image, mask, cfg.patch_size, e.raster.stem().string(), rule);
    auto& dst = e.split == SplitKind::train ? train_split : test_split;
    for (auto& t : tiles) dst.patches.push_back(std::move(t));
  }
  write_patch_set({train_split, test_split}, cfg.patches_dir());

  json summary{{"images", entries.size()}, {"patch_size", cfg.patch_size}, {"splits", json::object()}};
  std::size_t total = 0, positives = 0;
  for (const auto* s : {&train_split, &test_split}) {
    const double frac = s->size() ? static_cast<double>(s->positives()) / static_cast<double>(s->size()) : 0.0;
    summary["splits"][to_string(s->split)] = {
        {"patches", s->size()}, {"positives", s->positives()}, {"positive_fraction", frac}};
    total += s->size();
    positives += s->positives();
  }
  summary["patches"] = total;
  summary["positives"] = positives;
  summary["positive_fraction"] = total ? static_cast<double>(positives) / static_cast<double>(total) : 0.0;
  write_json(cfg.out / "prepare_summary.json", summary);
  ctx.log() << "prepared " << total << " patches from " << entries.size() << " images (" << positives
            << " positive, " << std::fixed << std::setprecision(1) << 100.0 * summary["positive_fraction"].get<double>()
            << "%) -> " << cfg.patches_dir().string() << '\n';
  return kOk;
}

inline int cmd_train(Context& ctx, const std::string& network) {
  const auto splits = load_patches(ctx);
  const auto train_split = require_split(splits, SplitKind::train);
  const auto bands = ctx.bands();
  json summary = json::object();
  auto record = [&](const std::string& name, const TrainResult& r, std::size_t params) {
    write_text(ctx.cfg.out / (name + "_curve.csv"), curve_csv(r.curve));
    summary[name] = {{"epochs_run", r.curve.size()},
                     {"best_epoch", r.best_epoch},
                     {"final_loss", r.curve.back().loss},
                     {"parameters", params},
                     {"used_validation", r.used_validation}};
    ctx.log() << name << ": " << r.curve.size() << " epochs, best epoch " << r.best_epoch << ", final loss "
              << r.curve.back().loss << '\n';
  };
  if (network == "classifier" || network == "both") {
    Classifier net(NetworkSpec::classifier(bands), mix_seed(ctx.cfg.seed, 31));
    TrainConfig tc = ctx.cfg.classifier;
    tc.seed = ctx.cfg.seed;
    tc.threshold = ctx.cfg.threshold;
    const auto r = train(net, train_split, tc);
    save_network(net, ctx.cls_path());
    record("classifier", r, net.parameter_count());
  }
  if (network == "segmenter" || network == "both") {
    Segmenter net(NetworkSpec::segmenter(bands), mix_seed(ctx.cfg.seed, 32));
    TrainConfig tc = ctx.cfg.segmenter;
    tc.seed = ctx.cfg.seed;
    tc.threshold = ctx.cfg.threshold;
    const auto r = train(net, train_split, tc);
    save_network(net, ctx.seg_path());
    record("segmenter", r, net.parameter_count());
  }
  write_json(ctx.cfg.out / "train_summary.json", summary);
  return kOk;
}

inline int cmd_eval(Context& ctx) {
  TwoTier model = load_model(ctx);
  const auto test_split = require_split(load_patches(ctx), SplitKind::test);
  const double thr = ctx.cfg.threshold;
  std::vector<EvalReport> rows{evaluate(model.classifier(), test_split, thr, "classifier"),
                               evaluate(model.segmenter(), test_split, thr, "segmenter"),
                               evaluate_two_tier(model, test_split, false, "two-tier")};
  write_reports(ctx.cfg.out / "eval", rows);
  print_reports(ctx.log(), rows);
  return kOk;
}

inline int cmd_baseline(Context& ctx, bool exclude_suppressed) {
  TwoTier model = load_model(ctx);
  const auto test_split = require_split(load_patches(ctx), SplitKind::test);
  const auto rows = run_baseline_comparison(parse_rule(ctx.cfg.rule), ctx.cfg.mapping, model, test_split,
                                            exclude_suppressed);
  write_reports(ctx.cfg.out / "baseline", rows);
  print_reports(ctx.log(), rows);
  return kOk;
}

inline int cmd_simulate(Context& ctx, const std::optional<fs::path>& image_path,
                        const std::optional<fs::path>& mask_path) {
  TwoTier model = load_model(ctx);
  RasterImage image;
  std::optional<MaskImage> truth;
  if (image_path) {
    image = read_raster(*image_path);
    if (mask_path) truth = read_mask(*mask_path);
    const double gsd = image.gsd_m;
    image = image.units_state == UnitsState::normalized ? resample_to_gsd(image, ctx.cfg.preprocess)
                                                        : preprocess_image(image, ctx.cfg.preprocess);
    if (truth) truth = resample_mask(*truth, gsd, ctx.cfg.preprocess);
  } else {
    const auto& y = ctx.cfg.synthetic;
    SceneSpec s;
    s.height = y.height;
    s.width = y.width;
    s.n_fires = y.n_fires;
    s.fire_fraction = y.fire_fraction;
    s.fire_radius_min = y.fire_radius_min;
    s.fire_radius_max = y.fire_radius_max;
    s.smoke_opacity = y.smoke_opacity;
    s.texture_seed = ctx.cfg.seed;
    auto scene = generate_scene(s, mix_seed(ctx.cfg.seed, 900));
    image = std::move(scene.image);
    truth = std::move(scene.mask);
  }
  FeedConfig feed{ctx.cfg.rate, ctx.cfg.queue_depth, ctx.cfg.patch_size, ctx.cfg.threaded};
  const auto rep = simulate_feed(image, truth, model, feed);
  write_stitch_report(rep, ctx.cfg.out / "simulate", true);
  ctx.log() << rep.log.size() << " patches at " << rep.rate << "/s: " << rep.segmenter_calls
            << " segmented, max lag " << std::fixed << std::setprecision(3) << rep.max_lag_s << " s, max queue "
            << rep.max_queue_depth << "/" << rep.queue_depth << ", real-time contract "
            << (rep.contract_held ? "held" : "VIOLATED") << '\n';
  return kOk;
}

inline int cmd_ablate(Context& ctx) {
  const auto splits = load_patches(ctx);
  const auto train_split = require_split(splits, SplitKind::train);
  const auto test_split = require_split(splits, SplitKind::test);
  AblationPlan plan;
  plan.subsets = parse_subsets(ctx.cfg.subsets);
  plan.classifier = plan.segmenter = false;
  for (const auto& n : ctx.cfg.networks)
    (network_kind_from_string(n) == NetworkKind::classifier ? plan.classifier : plan.segmenter) = true;
  plan.classifier_cfg = ctx.cfg.classifier;
  plan.segmenter_cfg = ctx.cfg.segmenter;
  plan.seeds.clear();
  for (std::size_t i = 0; i < ctx.cfg.seeds; ++i) plan.seeds.push_back(ctx.cfg.seed + i);
  plan.threshold = ctx.cfg.threshold;
  const auto rows = run_ablation(plan, train_split, test_split);
  for (auto kind : {NetworkKind::classifier, NetworkKind::segmenter}) {
    if ((kind == NetworkKind::classifier && !plan.classifier) || (kind == NetworkKind::segmenter && !plan.segmenter))
      continue;
    const auto csv = ablation_csv(rows, kind);
    write_text(ctx.cfg.out / ("ablation_" + to_string(kind) + ".csv"), csv);
    ctx.log() << to_string(kind) << " ablation (" << plan.seeds.size() << " seeds)\n" << csv;
  }
  write_json(ctx.cfg.out / "ablation.json", ablation_json(rows));
  return kOk;
}

inline int cmd_bench(Context& ctx) {
  const auto bands = ctx.bands();
  const bool have = fs::exists(ctx.cls_path()) && fs::exists(ctx.seg_path());
  // Explicitly named checkpoints must load; otherwise fall back to fresh
  // networks, which time the same as trained ones.
  const bool named = ctx.classifier_ckpt || ctx.segmenter_ckpt;
  const Classifier cls = have || named ? load_network<Classifier>(ctx.cls_path())
                                       : Classifier(NetworkSpec::classifier(bands), mix_seed(ctx.cfg.seed, 31));
  const Segmenter seg = have || named ? load_network<Segmenter>(ctx.seg_path())
                                      : Segmenter(NetworkSpec::segmenter(bands), mix_seed(ctx.cfg.seed, 32));
  const auto b = benchmark_inference(cls, seg, ctx.cfg.bench_count, ctx.cfg.bench_warmup, ctx.cfg.patch_size,
                                     ctx.cfg.seed);
  write_json(ctx.cfg.out / "bench.json", benchmark_json(b));
  auto line = [&](const char* name, const TimingStats& t) {
    ctx.log() << std::left << std::setw(12) << name << std::right << std::fixed << std::setprecision(3)
              << " mean " << t.mean_ms << " ms  p50 " << t.p50_ms << " ms  p95 " << t.p95_ms << " ms  "
              << std::setprecision(1) << t.fps() << " fps\n";
  };
  ctx.log() << b.classifier.count << " patches of " << b.patch_size << "x" << b.patch_size << "x" << b.channels
            << '\n';
  line("classifier", b.classifier);
  line("segmenter", b.segmenter);
  line("combined", b.combined);
  return kOk;
}

// ---- argument parsing --------------------------------------------------

struct Flags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> channels;
  std::optional<double> threshold;
  std::optional<double> rate;
  bool quiet = false;

  bool synthetic = false;
  std::optional<std::string> manifest;
  std::optional<std::string> patches;
  std::optional<std::size_t> patch_size;
  std::string network = "both";
  std::optional<std::size_t> epochs;
  std::optional<std::string> classifier_ckpt;
  std::optional<std::string> segmenter_ckpt;
  std::optional<std::string> rule;
  bool exclude_suppressed = false;
  std::optional<std::string> image;
  std::optional<std::string> mask;
  std::optional<std::size_t> queue_depth;
  bool no_gate = false;
  bool single_thread = false;
  std::optional<std::string> subsets;
  std::optional<std::size_t> seeds;
  std::optional<std::string> networks;
  std::optional<std::size_t> count;
  std::optional<std::size_t> warmup;
};

struct Parser {
  CLI::App app{"Wildfire localization on multispectral aerial imagery.", "firescan"};
  Flags f;
  CLI::App* prepare = nullptr;
  CLI::App* train = nullptr;
  CLI::App* eval = nullptr;
  CLI::App* baseline = nullptr;
  CLI::App* simulate = nullptr;
  CLI::App* ablate = nullptr;
  CLI::App* bench = nullptr;

  Parser() {
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--config", f.config, "JSON run configuration; flags override its values");
    app.add_option("--seed", f.seed, "Seed for data generation, initialization and shuffling");
    app.add_option("--out", f.out, "Output directory");
    app.add_option("--channels", f.channels, "Input bands, e.g. \"1-12\" or \"10,9,2\"");
    app.add_option("--threshold", f.threshold, "Gate and binarization threshold in [0,1)");
    app.add_option("--rate", f.rate, "Feed rate for simulate, patches per second");
    app.add_flag("--quiet", f.quiet, "Suppress the summary on standard output");

    auto ckpts = [&](CLI::App* sub) {
      sub->add_option("--classifier-ckpt", f.classifier_ckpt, "Classifier checkpoint (default <out>/classifier.ckpt)");
      sub->add_option("--segmenter-ckpt", f.segmenter_ckpt, "Segmenter checkpoint (default <out>/segmenter.ckpt)");
    };
    auto patches = [&](CLI::App* sub) {
      sub->add_option("--patches", f.patches, "Patch set directory (default <out>/patches)");
    };

    prepare = app.add_subcommand("prepare", "Preprocess images and cut them into labelled patches");
    prepare->add_flag("--synthetic", f.synthetic, "Generate synthetic scenes instead of reading a manifest");
    prepare->add_option("--manifest", f.manifest, "Dataset manifest JSON (raster, mask, split)");
    prepare->add_option("--patch-size", f.patch_size, "Patch edge in pixels");
    patches(prepare);

    train = app.add_subcommand("train", "Train the classifier and/or segmenter");
    train->add_option("--network", f.network, "classifier, segmenter or both")
        ->check(CLI::IsMember({"classifier", "segmenter", "both"}));
    train->add_option("--epochs", f.epochs, "Maximum epochs for every network trained");
    patches(train);

    eval = app.add_subcommand("eval", "Evaluate trained networks on the test split");
    ckpts(eval);
    patches(eval);

    baseline = app.add_subcommand("baseline", "Compare the color rule with the trained networks");
    baseline->add_option("--rule", f.rule, "Rule expression (default: the Schroeder rule)");
    baseline->add_flag("--exclude-suppressed", f.exclude_suppressed,
                       "Score the two-tier model only on patches the gate passed");
    ckpts(baseline);
    patches(baseline);

    simulate = app.add_subcommand("simulate", "Stream an image through the two-tier model at a fixed rate");
    simulate->add_option("--image", f.image, "Raster to stream (default: a synthetic scene)");
    simulate->add_option("--mask", f.mask, "Ground truth mask for --image");
    simulate->add_option("--queue-depth", f.queue_depth, "Bound on queued patches");
    simulate->add_option("--patch-size", f.patch_size, "Patch edge in pixels");
    simulate->add_flag("--no-gate", f.no_gate, "Segment every patch");
    simulate->add_flag("--single-thread", f.single_thread, "Run feeder and inference on one thread");
    ckpts(simulate);

    ablate = app.add_subcommand("ablate", "Train and score networks on channel subsets");
    ablate->add_option("--subsets", f.subsets, "Semicolon separated band lists, e.g. \"5,3,2;1-12\"");
    ablate->add_option("--seeds", f.seeds, "Number of training seeds per subset");
    ablate->add_option("--networks", f.networks, "classifier, segmenter or both")
        ->check(CLI::IsMember({"classifier", "segmenter", "both"}));
    ablate->add_option("--epochs", f.epochs, "Maximum epochs per run");
    patches(ablate);

    bench = app.add_subcommand("bench", "Time classifier and segmenter inference");
    bench->add_option("--count", f.count, "Timed patches");
    bench->add_option("--warmup", f.warmup, "Untimed warmup iterations (>= 1)");
    bench->add_option("--patch-size", f.patch_size, "Patch edge in pixels");
    ckpts(bench);
  }

  RunConfig resolve() const {
    RunConfig c = f.config ? load_config(*f.config) : RunConfig{};
    if (f.seed) c.seed = *f.seed;
    if (f.out) c.out = *f.out;
    if (f.channels) c.channels = *f.channels;
    if (f.threshold) c.threshold = *f.threshold;
    if (f.rate) c.rate = *f.rate;
    if (f.quiet) c.quiet = true;
    if (f.manifest) c.manifest = fs::path(*f.manifest);
    if (f.patches) c.patches = fs::path(*f.patches);
    if (f.patch_size) c.patch_size = *f.patch_size;
    if (f.epochs) c.classifier.epochs = c.segmenter.epochs = *f.epochs;
    if (f.rule) c.rule = *f.rule;
    if (f.queue_depth) c.queue_depth = *f.queue_depth;
    if (f.no_gate) c.gate = false;
    if (f.single_thread) c.threaded = false;
    if (f.subsets) c.subsets = *f.subsets;
    if (f.seeds) c.seeds = *f.seeds;
    if (f.networks) {
      c.networks = *f.networks == "both" ? std::vector<std::string>{"classifier", "segmenter"}
                                         : std::vector<std::string>{*f.networks};
    }
    if (f.count) c.bench_count = *f.count;
    if (f.warmup) c.bench_warmup = *f.warmup;
    return c;
  }
};

// Top-level help followed by each subcommand's help.
inline std::string help_text() {
  Parser p;
  std::string text = p.app.help();
  for (auto* sub : p.app.get_subcommands({})) text += "\n" + sub->help("firescan");
  return text;
}

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Parser p;
  try {
    std::reverse(args.begin(), args.end());
    p.app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = p.app.exit(e, out, err);
    return code == 0 ? kOk : kConfig;
  }
  const std::string name = p.app.get_subcommands().front()->get_name();
  try {
    Context ctx{p.resolve(), out, std::nullopt, std::nullopt};
    if (p.f.classifier_ckpt) ctx.classifier_ckpt = fs::path(*p.f.classifier_ckpt);
    if (p.f.segmenter_ckpt) ctx.segmenter_ckpt = fs::path(*p.f.segmenter_ckpt);
    validate(ctx.cfg);
    fs::create_directories(ctx.cfg.out);
    write_json(ctx.cfg.out / ("config." + name + ".json"), config_json(ctx.cfg));
    if (name == "prepare") return cmd_prepare(ctx, p.f.synthetic);
    if (name == "train") return cmd_train(ctx, p.f.network);
    if (name == "eval") return cmd_eval(ctx);
    if (name == "baseline") return cmd_baseline(ctx, p.f.exclude_suppressed);
    if (name == "simulate") {
      std::optional<fs::path> image, mask;
      if (p.f.image) image = *p.f.image;
      if (p.f.mask) mask = *p.f.mask;
      return cmd_simulate(ctx, image, mask);
    }
    if (name == "ablate") return cmd_ablate(ctx);
    return cmd_bench(ctx);
  } catch (const Error& e) {
    err << "firescan " << name << ": " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "firescan " << name << ": io: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "firescan " << name << ": " << e.what() << '\n';
    return kRuntime;
  }
}

}  // namespace firescan::cli
