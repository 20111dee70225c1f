#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "firescan/dataset.hpp"
#include "firescan/error.hpp"
#include "firescan/metrics.hpp"
#include "firescan/models.hpp"
#include "firescan/parallel.hpp"
#include "firescan/pipeline.hpp"
#include "firescan/random.hpp"
#include "firescan/rules.hpp"

namespace firescan {

// ---- spectral ablation -------------------------------------------------

struct ChannelSubset {
  std::string name;  // e.g. "11,9,2" or "1-8"
  std::vector<int> bands;
};

inline ChannelSubset make_subset(const std::string& text) { return {text, parse_band_list(text)}; }

// "5,3,2;1-12" -> two subsets.
inline std::vector<ChannelSubset> parse_subsets(const std::string& text) {
  std::vector<ChannelSubset> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ';')) {
    const auto b = part.find_first_not_of(" \t"), e = part.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(make_subset(part.substr(b, e - b + 1)));
  }
  return out;
}

// Default ablation rows: band groups from full spectrum down to RGB.
inline std::vector<ChannelSubset> default_subsets() {
  return {make_subset("1-12"), make_subset("11,9,2"), make_subset("10,9,2"), make_subset("9"), make_subset("10"),
          make_subset("11"),   make_subset("12"),     make_subset("1-8"),    make_subset("5,3,2")};
}

struct AblationPlan {
  std::vector<ChannelSubset> subsets;
  bool classifier = true;
  bool segmenter = false;
  TrainConfig classifier_cfg = TrainConfig::classifier_defaults();
  TrainConfig segmenter_cfg = TrainConfig::segmenter_defaults();
  std::vector<std::uint64_t> seeds{0, 1, 2};
  double threshold = 0.5;
};

struct AblationRow {
  std::string channels;
  NetworkKind kind = NetworkKind::classifier;
  Metrics mean;    // average over seeds of each defined metric
  Metrics stddev;  // population std over seeds; set only with 2+ seeds
  std::vector<EvalReport> per_seed;
};

namespace detail {

inline Metrics seed_mean(const std::vector<EvalReport>& reports, bool want_std) {
  auto stat = [&](auto get, bool std_dev) -> std::optional<double> {
    std::vector<double> v;
    for (const auto& r : reports)
      if (auto x = get(r.metrics)) v.push_back(*x);
    if (v.empty()) return std::nullopt;
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    if (!std_dev) return m;
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
  };
  auto acc = [](const Metrics& m) { return m.accuracy; };
  auto pre = [](const Metrics& m) { return m.precision; };
  auto rec = [](const Metrics& m) { return m.recall; };
  auto iou = [](const Metrics& m) { return m.iou; };
  return {stat(acc, want_std), stat(pre, want_std), stat(rec, want_std), stat(iou, want_std)};
}

inline void check_subset(const ChannelSubset& s, const DatasetSplit& split) {
  require(!s.bands.empty(), ErrorCode::config, "channel subset '" + s.name + "' is empty");
  if (split.patches.empty()) return;
  detail::channel_positions(split.patches.front().image.band_indices, s.bands);
}

}  // namespace detail

// Train and evaluate one network per (subset, kind, seed). Jobs run in
// parallel; rows come back in plan order regardless of scheduling.
inline std::vector<AblationRow> run_ablation(const AblationPlan& plan, const DatasetSplit& train_split,
                                             const DatasetSplit& test_split) {
  if (plan.subsets.empty()) return {};
  require(!plan.seeds.empty(), ErrorCode::config, "ablation needs at least one seed");
  require(plan.classifier || plan.segmenter, ErrorCode::config, "ablation needs at least one network kind");
  for (const auto& s : plan.subsets) {
    detail::check_subset(s, train_split);
    detail::check_subset(s, test_split);
  }
  std::vector<NetworkKind> kinds;
  if (plan.classifier) kinds.push_back(NetworkKind::classifier);
  if (plan.segmenter) kinds.push_back(NetworkKind::segmenter);

  struct Job {
    std::size_t subset, kind, seed;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < plan.subsets.size(); ++s)
    for (std::size_t k = 0; k < kinds.size(); ++k)
      for (std::size_t i = 0; i < plan.seeds.size(); ++i) jobs.push_back({s, k, i});

  std::vector<EvalReport> results(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    const auto& job = jobs[j];
    const auto& subset = plan.subsets[job.subset];
    const std::uint64_t seed = plan.seeds[job.seed];
    if (kinds[job.kind] == NetworkKind::classifier) {
      Classifier net(NetworkSpec::classifier(subset.bands), mix_seed(seed, 31));
      TrainConfig cfg = plan.classifier_cfg;
      cfg.seed = seed;
      train(net, train_split, cfg);
      results[j] = evaluate(net, test_split, plan.threshold, subset.name);
    } else {
      Segmenter net(NetworkSpec::segmenter(subset.bands), mix_seed(seed, 32));
      TrainConfig cfg = plan.segmenter_cfg;
      cfg.seed = seed;
      train(net, train_split, cfg);
      results[j] = evaluate(net, test_split, plan.threshold, subset.name);
    }
  });

  std::vector<AblationRow> rows;
  for (std::size_t j = 0; j < jobs.size(); j += plan.seeds.size()) {
    AblationRow row;
    row.channels = plan.subsets[jobs[j].subset].name;
    row.kind = kinds[jobs[j].kind];
    row.per_seed.assign(results.begin() + static_cast<std::ptrdiff_t>(j),
                        results.begin() + static_cast<std::ptrdiff_t>(j + plan.seeds.size()));
    row.mean = detail::seed_mean(row.per_seed, false);
    if (plan.seeds.size() > 1) row.stddev = detail::seed_mean(row.per_seed, true);
    rows.push_back(std::move(row));
  }
  return rows;
}

// One CSV per network kind: channels, accuracy, precision, recall[, iou]
// with *_std columns when more than one seed was run.
inline std::string ablation_csv(const std::vector<AblationRow>& rows, NetworkKind kind) {
  const bool with_iou = kind == NetworkKind::segmenter;
  bool with_std = false;
  for (const auto& r : rows)
    if (r.kind == kind && r.per_seed.size() > 1) with_std = true;
  std::string out = "channels,accuracy,precision,recall";
  if (with_iou) out += ",iou";
  if (with_std) out += with_iou ? ",accuracy_std,precision_std,recall_std,iou_std" : ",accuracy_std,precision_std,recall_std";
  out += "\n";
  for (const auto& r : rows) {
    if (r.kind != kind) continue;
    out += "\"" + r.channels + "\"," + format_metric(r.mean.accuracy) + "," + format_metric(r.mean.precision) + "," +
           format_metric(r.mean.recall);
    if (with_iou) out += "," + format_metric(r.mean.iou);
    if (with_std) {
      out += "," + format_metric(r.stddev.accuracy) + "," + format_metric(r.stddev.precision) + "," +
             format_metric(r.stddev.recall);
      if (with_iou) out += "," + format_metric(r.stddev.iou);
    }
    out += "\n";
  }
  return out;
}

inline nlohmann::json ablation_json(const std::vector<AblationRow>& rows) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& s : r.per_seed) seeds.push_back(report_json(s));
    out.push_back({{"channels", r.channels},
                   {"network", to_string(r.kind)},
                   {"accuracy", opt(r.mean.accuracy)},
                   {"precision", opt(r.mean.precision)},
                   {"recall", opt(r.mean.recall)},
                   {"iou", opt(r.mean.iou)},
                   {"per_seed", std::move(seeds)}});
  }
  return out;
}

// ---- baseline comparison -----------------------------------------------

inline EvalReport evaluate_rule(const RuleExpr& rule, const BandMapping& mapping, const DatasetSplit& split,
                                std::string method = "schroeder rule") {
  require(!split.patches.empty(), ErrorCode::data, "evaluation split is empty");
  ConfusionCounts counts;
  double total_ms = 0;
  for (const auto& pp : split.patches) {
    const RasterImage img = patch_to_raster(pp.image);
    const auto t0 = std::chrono::steady_clock::now();
    const MaskImage m = apply_rule(img, rule, mapping);
    total_ms += detail::elapsed_ms(t0);
    counts += confusion(m.data, pp.mask.data);
  }
  return make_report(std::move(method), counts, true, total_ms / static_cast<double>(split.size()), split.size());
}

// Pixel-level two-tier metrics. Suppressed patches contribute their blank
// masks unless exclude_suppressed is set.
inline EvalReport evaluate_two_tier(const TwoTier& model, const DatasetSplit& split, bool exclude_suppressed = false,
                                    std::string method = "two-tier") {
  require(!split.patches.empty(), ErrorCode::data, "evaluation split is empty");
  ConfusionCounts counts;
  double total_ms = 0;
  for (const auto& pp : split.patches) {
    const auto out = model.infer(pp.image);
    total_ms += out.decision.classifier_ms + out.decision.segmenter_ms;
    if (exclude_suppressed && !out.decision.gated) continue;
    counts += confusion(out.mask.data, pp.mask.data);
  }
  return make_report(std::move(method), counts, true, total_ms / static_cast<double>(split.size()), split.size());
}

// Rows: rule, classifier (patch level), segmenter and two-tier (pixel level).
inline std::vector<EvalReport> run_baseline_comparison(const RuleExpr& rule, const BandMapping& mapping,
                                                       const TwoTier& model, const DatasetSplit& test,
                                                       bool exclude_suppressed = false) {
  const double thr = model.config().threshold;
  TwoTier gated(Classifier(model.classifier()), Segmenter(model.segmenter()), {thr, true});
  return {evaluate_rule(rule, mapping, test), evaluate(model.classifier(), test, thr, "classifier"),
          evaluate(model.segmenter(), test, thr, "segmenter"),
          evaluate_two_tier(gated, test, exclude_suppressed, "two-tier")};
}

// ---- inference benchmark -----------------------------------------------

struct BenchmarkReport {
  std::size_t patch_size = 0;
  std::size_t channels = 0;
  TimingStats classifier;
  TimingStats segmenter;
  TimingStats combined;  // classifier then segmenter on the same patch
};

inline BenchmarkReport benchmark_inference(const Classifier& cls, const Segmenter& seg, std::size_t n_patches,
                                           std::size_t warmup = 1, std::size_t patch_size = kPatchSize,
                                           std::uint64_t seed = 0) {
  require(n_patches > 0, ErrorCode::invalid_argument, "benchmark needs at least one patch");
  require(warmup >= 1, ErrorCode::invalid_argument, "benchmark needs at least one warmup iteration");
  Rng rng(seed);
  auto make_input = [&](const NetworkSpec& spec) {
    Tensor x({1, spec.in_channels(), patch_size, patch_size});
    for (auto& v : x.values()) v = static_cast<float>(uniform01(rng));
    return x;
  };
  const Tensor xc = make_input(cls.spec()), xs = make_input(seg.spec());
  for (std::size_t i = 0; i < warmup; ++i) {
    (void)cls.infer(xc);
    (void)seg.infer(xs);
  }
  std::vector<double> tc, ts, tb;
  for (std::size_t i = 0; i < n_patches; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    (void)cls.infer(xc);
    tc.push_back(detail::elapsed_ms(t0));
    t0 = std::chrono::steady_clock::now();
    (void)seg.infer(xs);
    ts.push_back(detail::elapsed_ms(t0));
    tb.push_back(tc.back() + ts.back());
  }
  return {patch_size, cls.spec().in_channels(), timing_stats(tc), timing_stats(ts), timing_stats(tb)};
}

inline nlohmann::json benchmark_json(const BenchmarkReport& b) {
  return {{"patch_size", b.patch_size},
          {"channels", b.channels},
          {"classifier", timing_json(b.classifier)},
          {"segmenter", timing_json(b.segmenter)},
          {"combined", timing_json(b.combined)}};
}

}  // namespace firescan
