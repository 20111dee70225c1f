// Acceptance suite: one PASS/FAIL line per criterion.
//
//   firescan_acceptance            run criteria 1-10
//   firescan_acceptance 4 6        run a subset
//
// Criterion 10 needs the published AMS flights converted to the raster
// container; point FIRESCAN_AMS_DIR at a directory holding manifest.json.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "firescan/firescan.hpp"
#include "../support/gradcheck.hpp"
#include "../support/temp_dir.hpp"

using namespace firescan;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  enum class Status { pass, fail, skip } status = Status::fail;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome verdict(bool ok, std::string detail) {
  return {ok ? Outcome::Status::pass : Outcome::Status::fail, std::move(detail)};
}

// Runtime budgets are part of each criterion.
Outcome within(Outcome o, double elapsed_s, double budget_s) {
  o.detail += fmt("; %.1f s (limit %.0f s)", elapsed_s, budget_s);
  if (elapsed_s >= budget_s && o.status == Outcome::Status::pass) o.status = Outcome::Status::fail;
  return o;
}

// ---- shared trained models ---------------------------------------------

struct Shared {
  std::optional<Classifier> classifier;  // from criterion 4
  std::optional<Segmenter> segmenter;    // from criterion 5
};
Shared shared;

DatasetSplit overfit_classifier_set() {
  PatchSetSpec ps;
  ps.count = 64;
  ps.size = 64;
  ps.positive_fraction = 0.5;
  return generate_patch_set(ps, 4001);
}

DatasetSplit overfit_segmenter_set() {
  PatchSetSpec ps;
  ps.count = 32;
  ps.size = 64;
  ps.positive_fraction = 1.0;
  return generate_patch_set(ps, 5001);
}

TrainConfig overfit_config(TrainConfig c, double target) {
  c.epochs = 200;
  c.val_fraction = 0;  // monitor the training set itself
  c.target_metric = target;
  c.patience = 0;
  c.seed = 7;
  return c;
}

Classifier train_classifier(const DatasetSplit& set, TrainResult* result = nullptr) {
  Classifier net(NetworkSpec::classifier(), 41);
  auto r = train(net, set, overfit_config(TrainConfig::classifier_defaults(), 0.95));
  if (result) *result = std::move(r);
  return net;
}

Segmenter train_segmenter(const DatasetSplit& set, TrainResult* result = nullptr) {
  Segmenter net(NetworkSpec::segmenter(), 51);
  auto r = train(net, set, overfit_config(TrainConfig::segmenter_defaults(), 0.85));
  if (result) *result = std::move(r);
  return net;
}

const Classifier& trained_classifier() {
  if (!shared.classifier) shared.classifier = train_classifier(overfit_classifier_set());
  return *shared.classifier;
}

const Segmenter& trained_segmenter() {
  if (!shared.segmenter) shared.segmenter = train_segmenter(overfit_segmenter_set());
  return *shared.segmenter;
}

// ---- 1: gradient suite ---------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto checks = gradcheck::run_suite(20240601, 5);
  double worst = 0;
  std::string worst_op;
  bool finite = true;
  std::map<std::string, int> runs;
  for (const auto& c : checks) {
    if (c.rel_error > worst) {
      worst = c.rel_error;
      worst_op = c.op + " d/d" + c.wrt;
    }
    finite = finite && c.finite;
    if (c.wrt == "input" || c.wrt == "prediction" || c.wrt == "logit") ++runs[c.op];
  }
  int fewest = 1 << 30;
  for (const auto& [op, n] : runs) fewest = std::min(fewest, n);
  const bool ok = worst < 1e-3 && finite && runs.size() >= 10 && fewest >= 5;
  return within(verdict(ok, fmt("%zu checks over %zu ops, >= %d shapes each, max rel err %.2e (%s)", checks.size(),
                                runs.size(), fewest, worst, worst_op.c_str())),
                seconds_since(t0), 60);
}

// ---- 2: metric oracle ----------------------------------------------------

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  Rng rng(2002);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const double pp = uniform01(rng), pt = uniform01(rng);
    MaskImage pred = make_mask(64, 64), truth = make_mask(64, 64);
    for (auto& v : pred.data) v = uniform01(rng) < pp;
    for (auto& v : truth.data) v = uniform01(rng) < pt;
    // Streaming: accumulate row by row.
    ConfusionCounts stream;
    for (std::size_t r = 0; r < 64; ++r)
      stream += confusion(std::span(pred.data).subspan(r * 64, 64), std::span(truth.data).subspan(r * 64, 64));
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t r = 0; r < 64; ++r)
      for (std::size_t c = 0; c < 64; ++c) {
        const bool p = pred.at(r, c), t = truth.at(r, c);
        tp += p && t;
        fp += p && !t;
        fn += !p && t;
        tn += !p && !t;
      }
    const auto m = metrics_from_counts(stream);
    const bool iou_ok = (tp + fp + fn == 0) ? !m.iou.has_value()
                                            : (m.iou && *m.iou == static_cast<double>(tp) /
                                                                      static_cast<double>(tp + fp + fn));
    if (stream.tp != tp || stream.fp != fp || stream.fn != fn || stream.tn != tn || !iou_ok) ++mismatches;
  }
  return within(verdict(mismatches == 0, fmt("100 mask pairs of 64x64, %zu mismatches", mismatches)),
                seconds_since(t0), 10);
}

// ---- 3: Schroeder rule ---------------------------------------------------

PixelSpectrum px(double r1, double r5, double r6, double r7) { return PixelSpectrum{{{1, r1}, {5, r5}, {6, r6}, {7, r7}}}; }

Outcome schroeder_rule_check() {
  const auto t0 = Clock::now();
  const double eps = 1e-6;
  std::size_t boundary_cases = 0, boundary_failures = 0;
  const auto expr = schroeder_expr();
  // Each predicate alone, at threshold - eps, threshold, threshold + eps.
  for (const auto& p : predicates(expr)) {
    for (int side : {-1, 0, 1}) {
      PixelSpectrum s = px(0.5, 1.0, 0.5, 0.5);
      const double target = p.value + side * eps;
      switch (p.term.kind) {
        case RuleTerm::Kind::band: s.rho[p.term.i] = target; break;
        case RuleTerm::Kind::diff:
          s.rho[p.term.j] = 0.0;
          s.rho[p.term.i] = target;
          break;
        case RuleTerm::Kind::ratio:
          s.rho[p.term.j] = 1.0;
          s.rho[p.term.i] = target;
          break;
      }
      const bool expect = p.cmp == Cmp::greater ? side > 0 : side < 0;
      ++boundary_cases;
      boundary_failures += evaluate(p, s) != expect;
    }
  }
  // The whole rule, crossing each threshold with the other predicates held
  // true. (b7 - b5) > 0.3 is implied by the ratio and b7 > 0.5, so its
  // boundary is only reachable predicate-wise above.
  struct Case {
    PixelSpectrum s;
    bool expect;
  };
  const std::vector<Case> rule_cases{
      {px(1, 0.1, 0, 0.5 - eps), false},        {px(1, 0.1, 0, 0.5), false},
      {px(1, 0.1, 0, 0.5 + eps), true},         {px(1, 0.25, 0, 0.625 - eps), false},
      {px(1, 0.25, 0, 0.625), false},           {px(1, 0.25, 0, 0.625 + 4 * eps), true},
      {px(0.1, 0.5, 0.8 - eps, 0.05), false},
      {px(0.1, 0.5, 0.8, 0.05), false},         {px(0.1, 0.5, 0.8 + eps, 0.05), true},
      {px(0.2 - eps, 0.5, 0.9, 0.05), true},    {px(0.2, 0.5, 0.9, 0.05), false},
      {px(0.2 + eps, 0.5, 0.9, 0.05), false},   {px(0.1, 0.4 - eps, 0.9, 0.2), false},
      {px(0.1, 0.4, 0.9, 0.2), false},          {px(0.1, 0.4 + eps, 0.9, 0.2), true},
      {px(0.1, 0.3, 0.9, 0.1 - eps), true},     {px(0.1, 0.3, 0.9, 0.1), false},
      {px(0.1, 0.3, 0.9, 0.1 + eps), false},
  };
  for (const auto& c : rule_cases) {
    ++boundary_cases;
    boundary_failures += schroeder_rule(c.s) != c.expect || evaluate(expr, c.s) != c.expect;
  }

  // Scalar vs vectorized on 10^4 random pixels, with planted zero denominators.
  RasterImage img = make_raster(100, 100, ams_band_profile(), UnitsState::normalized);
  Rng rng(3003);
  for (auto& v : img.data) v = static_cast<float>(uniform01(rng));
  for (int i = 0; i < 300; ++i) img.band(6)[uniform_index(rng, img.plane_size())] = 0.0f;
  const auto mapping = schroeder_ams_mapping();
  const MaskImage mask = apply_rule(img, expr, mapping);
  std::size_t disagreements = 0, fires = 0;
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c) {
      const auto s = pixel_spectrum(img, r, c, mapping);
      disagreements += (mask.at(r, c) != 0) != schroeder_rule(s);
      fires += mask.at(r, c);
    }
  const bool ok = boundary_failures == 0 && disagreements == 0;
  return within(verdict(ok, fmt("%zu boundary cases (%zu wrong); 10000 pixels, %zu fire, %zu scalar/vector "
                                "disagreements",
                                boundary_cases, boundary_failures, fires, disagreements)),
                seconds_since(t0), 10);
}

// ---- 4: classifier overfit -----------------------------------------------

bool same_parameters(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].first != b[i].first || a[i].second.to_vector() != b[i].second.to_vector()) return false;
  return true;
}

Outcome classifier_overfit() {
  const auto t0 = Clock::now();
  const auto set = overfit_classifier_set();
  TrainResult r1, r2;
  Classifier a = train_classifier(set, &r1);
  const double acc = *evaluate(a, set).metrics.accuracy;
  Classifier b = train_classifier(set, &r2);
  const bool deterministic = same_parameters(a.to_named_tensors(), b.to_named_tensors()) &&
                             r1.curve.size() == r2.curve.size() && r1.curve.back().loss == r2.curve.back().loss;
  shared.classifier = std::move(a);
  return within(verdict(acc >= 0.95 && r1.curve.size() <= 200 && deterministic,
                        fmt("64 patches 64x64x12 (%zu positive): train accuracy %.3f after %zu epochs; rerun with "
                            "same seed %s",
                            set.positives(), acc, r1.curve.size(), deterministic ? "bit-identical" : "DIFFERS")),
                seconds_since(t0), 300);
}

// ---- 5: segmenter overfit ------------------------------------------------

Outcome segmenter_overfit() {
  const auto t0 = Clock::now();
  const auto set = overfit_segmenter_set();
  TrainResult r;
  Segmenter net = train_segmenter(set, &r);
  const double iou = evaluate(net, set).metrics.iou.value_or(0.0);
  shared.segmenter = std::move(net);
  return within(verdict(iou >= 0.85 && r.curve.size() <= 200,
                        fmt("32 positive patches 64x64x12: train IoU %.3f after %zu epochs", iou, r.curve.size())),
                seconds_since(t0), 600);
}

// ---- 6: two-tier gating --------------------------------------------------

Outcome two_tier_gating() {
  TwoTier model{Classifier(trained_classifier()), Segmenter(trained_segmenter())};
  const auto t0 = Clock::now();
  // Compose the feed by gate outcome: 80 gate-negative and 20 gate-positive
  // patches, taken in pool order from a 20% positive pool.
  PatchSetSpec ps;
  ps.count = 200;
  ps.size = kPatchSize;
  ps.positive_fraction = 0.2;
  const auto pool = generate_patch_set(ps, 6006);
  std::vector<const Patch*> feed;
  std::size_t want_negative = 80, want_positive = 20, truly_positive = 0;
  for (const auto& pp : pool.patches) {
    if (want_negative + want_positive == 0) break;
    const float p = model.classifier().infer(detail::single_batch(pp.image, model.classifier().spec().bands))[0];
    auto& want = p > model.config().threshold ? want_positive : want_negative;
    if (want == 0) continue;
    --want;
    feed.push_back(&pp.image);
    truly_positive += pp.image.label == PatchLabel::positive;
  }
  if (feed.size() != 100)
    return verdict(false, fmt("pool of %zu patches yielded only %zu of the 80/20 feed", pool.size(), feed.size()));

  std::size_t gate_positive = 0;
  double gated_ms = 0;
  for (const Patch* patch : feed) {
    const auto s = Clock::now();
    const auto out = model.infer(*patch);
    gated_ms += std::chrono::duration<double, std::milli>(Clock::now() - s).count();
    gate_positive += out.decision.gated;
  }
  const std::size_t calls = model.segmenter_calls();

  model.set_config({model.config().threshold, false});
  double always_ms = 0;
  for (const Patch* patch : feed) {
    const auto s = Clock::now();
    (void)model.infer(*patch);
    always_ms += std::chrono::duration<double, std::milli>(Clock::now() - s).count();
  }
  const double ratio = gated_ms / always_ms;
  const std::size_t gate_negative = feed.size() - gate_positive;
  const bool ok = calls == gate_positive && gate_negative == 80 && ratio < 0.5;
  return within(verdict(ok, fmt("100 patches 256x256 (%zu truly positive), %zu gate-negative; segmenter calls %zu = "
                                "gate-positive %zu; mean latency %.1f ms vs always-segment %.1f ms (ratio %.3f)",
                                truly_positive, gate_negative, calls, gate_positive, gated_ms / 100.0,
                                always_ms / 100.0, ratio)),
                seconds_since(t0), 60);
}

// ---- 7: stream/offline equivalence -----------------------------------------

Outcome stream_offline() {
  TwoTier model{Classifier(trained_classifier()), Segmenter(trained_segmenter())};
  const auto t0 = Clock::now();
  std::size_t identical = 0, patches = 0;
  bool contract = true;
  double max_lag = 0;
  for (std::uint64_t k = 0; k < 3; ++k) {
    SceneSpec s;
    s.height = 512;
    s.width = 768;
    const auto scene = generate_scene(s, 7000 + k);
    FeedConfig cfg;
    cfg.rate = 1.0;
    const auto rep = simulate_feed(scene.image, scene.mask, model, cfg);
    const auto offline = offline_batch_infer(scene.image, model);
    identical += rep.mask == offline;
    contract = contract && rep.contract_held;
    max_lag = std::max(max_lag, rep.max_lag_s);
    patches += rep.log.size();
  }
  return within(verdict(identical == 3 && contract,
                        fmt("3 scenes 512x768, %zu patches at 1 patch/s: %zu/3 stitched masks bit-identical to offline "
                            "batch; contract %s, max lag %.3f s",
                            patches, identical, contract ? "held" : "VIOLATED", max_lag)),
                seconds_since(t0), 120);
}

// ---- 8: spectral ablation direction --------------------------------------

Outcome ablation_direction() {
  const auto t0 = Clock::now();
  // Patch statistics follow the real data: about 18% positive patches.
  PatchSetSpec ps;
  ps.count = 200;
  ps.size = 32;
  ps.positive_fraction = 0.18;
  const auto train_set = generate_patch_set(ps, 8001);
  ps.split = SplitKind::test;
  const auto test_set = generate_patch_set(ps, 8002);

  AblationPlan plan;
  plan.subsets = parse_subsets("5,3,2;10,9,2;10;1-12");
  plan.classifier_cfg.epochs = 20;
  plan.classifier_cfg.val_fraction = 0.25;
  plan.seeds = {0, 1, 2};
  const auto rows = run_ablation(plan, train_set, test_set);

  bool ok = true;
  std::string detail = "recall over 3 seeds:";
  for (const auto& row : rows) {
    const double recall = row.mean.recall.value_or(0.0);
    const auto bands = parse_band_list(row.channels);
    const bool has10 = std::find(bands.begin(), bands.end(), 10) != bands.end();
    const bool row_ok = has10 ? recall > 0.70 : recall < 0.15;
    ok = ok && row_ok;
    detail += fmt(" {%s} %.1f%%", row.channels.c_str(), 100.0 * recall);
  }
  return within(verdict(ok, detail + " (need {5,3,2} < 15%, band-10 subsets > 70%)"), seconds_since(t0), 1800);
}

// ---- 9: format round trips -----------------------------------------------

Outcome format_round_trips() {
  const auto t0 = Clock::now();
  TempDir dir;
  Rng rng(9009);
  const auto profile = ams_band_profile();
  std::size_t raster_ok = 0, mask_ok = 0, ckpt_ok = 0;
  for (int i = 0; i < 100; ++i) {
    std::vector<BandSpec> bands;
    for (const auto& b : profile)
      if (uniform01(rng) < 0.5) bands.push_back(b);
    if (bands.empty()) bands.push_back(profile[uniform_index(rng, profile.size())]);
    const bool normalized = uniform01(rng) < 0.5;
    RasterImage img = make_raster(1 + uniform_index(rng, 40), 1 + uniform_index(rng, 40), bands,
                                  normalized ? UnitsState::normalized : UnitsState::raw_radiance,
                                  uniform(rng, 0.5, 30.0));
    for (auto& v : img.data) v = static_cast<float>(normalized ? uniform01(rng) : uniform(rng, 0, 500));
    if (uniform01(rng) < 0.5) img.acquisition = "2023-09-0" + std::to_string(1 + i % 9) + "T12:00:00Z";
    write_raster(img, dir / "r.msrf");
    raster_ok += read_raster(dir / "r.msrf") == img;

    MaskImage m = make_mask(1 + uniform_index(rng, 64), 1 + uniform_index(rng, 64));
    for (auto& v : m.data) v = uniform01(rng) < 0.3;
    write_mask(m, dir / "m.mask");
    mask_ok += read_mask(dir / "m.mask") == m;

    NamedTensors named;
    const std::size_t count = 1 + uniform_index(rng, 6);
    for (std::size_t t = 0; t < count; ++t) {
      Shape shape;
      const std::size_t rank = uniform_index(rng, 5);
      for (std::size_t d = 0; d < rank; ++d) shape.push_back(1 + uniform_index(rng, 5));
      Tensor tensor(shape);
      for (auto& v : tensor.values()) v = static_cast<float>(normal01(rng));
      named.emplace_back("layer" + std::to_string(t) + ".w", std::move(tensor));
    }
    save_checkpoint(named, dir / "c.ckpt");
    ckpt_ok += same_parameters(load_checkpoint(dir / "c.ckpt"), named);
  }
  return within(verdict(raster_ok == 100 && mask_ok == 100 && ckpt_ok == 100,
                        fmt("identity on %zu/100 rasters, %zu/100 masks, %zu/100 checkpoints", raster_ok, mask_ok,
                            ckpt_ok)),
                seconds_since(t0), 30);
}

// ---- 10: full AMS reproduction (optional) --------------------------------

Outcome ams_reproduction() {
  const char* root = std::getenv("FIRESCAN_AMS_DIR");
  if (!root) return {Outcome::Status::skip, "FIRESCAN_AMS_DIR not set; multi-hour run, not gating"};
  const auto t0 = Clock::now();
  const std::filesystem::path dir(root);
  std::ifstream is(dir / "manifest.json");
  const auto entries = parse_manifest(nlohmann::json::parse(is), dir);
  DatasetSplit train_split, test_split;
  train_split.split = SplitKind::train;
  test_split.split = SplitKind::test;
  for (const auto& e : entries) {
    RasterImage image = read_raster(e.raster);
    const double gsd = image.gsd_m;
    image = image.units_state == UnitsState::normalized ? resample_to_gsd(image) : preprocess_image(image);
    const MaskImage mask = resample_mask(read_mask(e.mask), gsd);
    for (auto& p : grid_patches(image, mask, kPatchSize, e.raster.stem().string()))
      (e.split == SplitKind::train ? train_split : test_split).patches.push_back(std::move(p));
  }
  Classifier cls(NetworkSpec::classifier(), 1);
  train(cls, train_split, TrainConfig::classifier_defaults());
  Segmenter seg(NetworkSpec::segmenter(), 2);
  train(seg, train_split, TrainConfig::segmenter_defaults());
  const double acc = *evaluate(cls, test_split).metrics.accuracy;
  const double iou = evaluate(seg, test_split).metrics.iou.value_or(0.0);
  return verdict(std::abs(acc - 0.968) <= 0.03 && std::abs(iou - 0.740) <= 0.05,
                 fmt("classifier accuracy %.3f (target 0.968 +- 0.03), segmenter IoU %.3f (target 0.740 +- 0.05); "
                     "%.0f s",
                     acc, iou, seconds_since(t0)));
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"metric oracle", metric_oracle},
      {"schroeder rule", schroeder_rule_check},
      {"synthetic overfit (classification)", classifier_overfit},
      {"synthetic overfit (segmentation)", segmenter_overfit},
      {"two-tier gating", two_tier_gating},
      {"stream/offline equivalence", stream_offline},
      {"spectral ablation direction", ablation_direction},
      {"format round-trips", format_round_trips},
      {"extended AMS reproduction", ams_reproduction},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {Outcome::Status::fail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.status == Outcome::Status::pass ? "PASS" : o.status == Outcome::Status::skip ? "SKIP" : "FAIL";
    failures += o.status == Outcome::Status::fail;
    std::printf("%s %2d %s: %s\n", tag, id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
