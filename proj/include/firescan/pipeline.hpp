#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"

#include "firescan/bounded_queue.hpp"
#include "firescan/dataset.hpp"
#include "firescan/error.hpp"
#include "firescan/metrics.hpp"
#include "firescan/models.hpp"
#include "firescan/raster_io.hpp"

namespace firescan {

struct TwoTierConfig {
  double threshold = 0.5;
  // false: skip the classifier and segment every patch (baseline).
  bool gate = true;
};

struct TierDecision {
  std::optional<double> classifier_prob;  // empty when the gate is bypassed
  bool gated = false;                     // gate open (prob > threshold, or bypassed)
  bool segmentation_invoked = false;
  double classifier_ms = 0;
  double segmenter_ms = 0;
};

struct TierOutput {
  MaskPatch mask;
  TierDecision decision;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

inline Tensor single_batch(const Patch& p, const std::vector<int>& bands) {
  if (p.band_indices == bands) return p.data.reshaped({1, p.channels(), p.size(), p.size()});
  const Patch sub = select_channels(p, bands);
  return sub.data.reshaped({1, sub.channels(), sub.size(), sub.size()});
}

}  // namespace detail

// Classifier gate in front of the segmenter. The call counters are atomic so
// they can be audited while a feed runs on another thread.
class TwoTier {
 public:
  TwoTier(Classifier classifier, Segmenter segmenter, TwoTierConfig cfg = {})
      : cls_(std::move(classifier)), seg_(std::move(segmenter)), cfg_(cfg) {
    require(cfg_.threshold >= 0 && cfg_.threshold < 1, ErrorCode::config, "threshold must be in [0,1)");
  }

  TwoTier(TwoTier&& o) noexcept
      : cls_(std::move(o.cls_)),
        seg_(std::move(o.seg_)),
        cfg_(o.cfg_),
        segmenter_calls_(o.segmenter_calls_.load()),
        classifier_calls_(o.classifier_calls_.load()) {}

  static TwoTier load(const std::filesystem::path& classifier_ckpt, const std::filesystem::path& segmenter_ckpt,
                      TwoTierConfig cfg = {}) {
    return TwoTier(load_network<Classifier>(classifier_ckpt), load_network<Segmenter>(segmenter_ckpt), cfg);
  }

  TierOutput infer(const Patch& patch) const {
    TierOutput out;
    out.mask.size = patch.size();
    out.mask.source_id = patch.source_id;
    out.mask.row_off = patch.row_off;
    out.mask.col_off = patch.col_off;
    out.mask.data.assign(patch.size() * patch.size(), 0);
    auto& d = out.decision;
    if (cfg_.gate) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor p = cls_.infer(detail::single_batch(patch, cls_.spec().bands));
      d.classifier_ms = detail::elapsed_ms(t0);
      ++classifier_calls_;
      d.classifier_prob = p[0];
      d.gated = p[0] > cfg_.threshold;
    } else {
      d.gated = true;
    }
    if (d.gated) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor probs = seg_.infer(detail::single_batch(patch, seg_.spec().bands));
      d.segmenter_ms = detail::elapsed_ms(t0);
      ++segmenter_calls_;
      d.segmentation_invoked = true;
      for (std::size_t i = 0; i < out.mask.data.size(); ++i) out.mask.data[i] = probs[i] > cfg_.threshold;
    }
    return out;
  }

  const Classifier& classifier() const noexcept { return cls_; }
  const Segmenter& segmenter() const noexcept { return seg_; }
  Classifier& classifier() noexcept { return cls_; }
  Segmenter& segmenter() noexcept { return seg_; }
  const TwoTierConfig& config() const noexcept { return cfg_; }
  void set_config(const TwoTierConfig& cfg) { cfg_ = cfg; }

  std::size_t segmenter_calls() const noexcept { return segmenter_calls_.load(); }
  std::size_t classifier_calls() const noexcept { return classifier_calls_.load(); }
  void reset_counters() noexcept {
    segmenter_calls_ = 0;
    classifier_calls_ = 0;
  }

 private:
  Classifier cls_;
  Segmenter seg_;
  TwoTierConfig cfg_;
  mutable std::atomic<std::size_t> segmenter_calls_{0};
  mutable std::atomic<std::size_t> classifier_calls_{0};
};

// ---- stitching ---------------------------------------------------------

// Place each tile at its offset. Tiles must cover the full grid of
// floor(H/S) x floor(W/S) positions exactly once; borders stay zero.
inline MaskImage stitch(const std::vector<MaskPatch>& tiles, std::size_t height, std::size_t width,
                        std::size_t size) {
  require(size > 0, ErrorCode::invalid_argument, "tile size must be positive");
  const std::size_t rows = height / size, cols = width / size;
  std::vector<std::uint8_t> seen(rows * cols, 0);
  MaskImage out = make_mask(height, width);
  for (const auto& t : tiles) {
    require(t.size == size && t.data.size() == size * size, ErrorCode::shape_mismatch, "tile size mismatch");
    require(t.row_off % size == 0 && t.col_off % size == 0, ErrorCode::data, "tile offset is off the grid");
    const std::size_t gr = t.row_off / size, gc = t.col_off / size;
    require(gr < rows && gc < cols, ErrorCode::data, "tile position outside the grid");
    require(!seen[gr * cols + gc], ErrorCode::data,
            "duplicate tile at grid (" + std::to_string(gr) + "," + std::to_string(gc) + ")");
    seen[gr * cols + gc] = 1;
    for (std::size_t r = 0; r < size; ++r)
      std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(r * size), size,
                  out.data.begin() + static_cast<std::ptrdiff_t>((t.row_off + r) * width + t.col_off));
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    require(seen[i] != 0, ErrorCode::data,
            "missing tile at grid (" + std::to_string(i / cols) + "," + std::to_string(i % cols) + ")");
  return out;
}

// Grid patches of an image without a mask, row-major.
inline std::vector<Patch> image_grid(const RasterImage& image, std::size_t size = kPatchSize,
                                     const std::string& source_id = "") {
  require(image.units_state == UnitsState::normalized, ErrorCode::state, "inference requires a normalized image");
  const MaskImage blank = make_mask(image.height, image.width);
  std::vector<Patch> out;
  for (auto& p : grid_patches(image, blank, size, source_id)) out.push_back(std::move(p.image));
  return out;
}

// Offline reference: infer every grid patch in order and stitch.
inline MaskImage offline_infer(const RasterImage& image, const TwoTier& model, std::size_t size = kPatchSize) {
  std::vector<MaskPatch> tiles;
  for (const auto& p : image_grid(image, size)) tiles.push_back(model.infer(p).mask);
  return stitch(tiles, image.height, image.width, size);
}

// Offline reference with batched network calls: all patches through the
// classifier, then the gated ones through the segmenter, `batch` at a time.
inline MaskImage offline_batch_infer(const RasterImage& image, const TwoTier& model, std::size_t size = kPatchSize,
                                     std::size_t batch = 8) {
  std::vector<PatchPair> pairs;
  for (auto& p : image_grid(image, size)) pairs.push_back({std::move(p), MaskPatch{}});
  const double thr = model.config().threshold;
  auto run = [&](const std::vector<int>& bands, const std::vector<std::size_t>& idx, auto&& net) {
    std::vector<float> out;
    for (std::size_t s = 0; s < idx.size(); s += batch) {
      std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(s),
                                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + batch)));
      std::vector<PatchPair> sub;
      for (auto i : chunk)
        sub.push_back({pairs[i].image.band_indices == bands ? pairs[i].image : select_channels(pairs[i].image, bands),
                       MaskPatch{}});
      std::vector<std::size_t> all(sub.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      const Tensor y = net.infer(batch_images(sub, all));
      out.insert(out.end(), y.values().begin(), y.values().end());
    }
    return out;
  };
  std::vector<std::size_t> every(pairs.size()), gated;
  std::iota(every.begin(), every.end(), std::size_t{0});
  if (model.config().gate) {
    const auto probs = run(model.classifier().spec().bands, every, model.classifier());
    for (std::size_t i = 0; i < probs.size(); ++i)
      if (probs[i] > thr) gated.push_back(i);
  } else {
    gated = every;
  }
  std::vector<MaskPatch> tiles(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    tiles[i].size = size;
    tiles[i].row_off = pairs[i].image.row_off;
    tiles[i].col_off = pairs[i].image.col_off;
    tiles[i].data.assign(size * size, 0);
  }
  const auto seg = run(model.segmenter().spec().bands, gated, model.segmenter());
  for (std::size_t k = 0; k < gated.size(); ++k)
    for (std::size_t i = 0; i < size * size; ++i) tiles[gated[k]].data[i] = seg[k * size * size + i] > thr;
  return stitch(tiles, image.height, image.width, size);
}

// ---- feed simulation ---------------------------------------------------

struct FeedConfig {
  double rate = 1.0;  // patches per second
  std::size_t queue_depth = 4;
  std::size_t patch_size = kPatchSize;
  bool threaded = true;  // false: feeder and inference share one thread
};

struct PatchLog {
  std::size_t index = 0;
  std::size_t grid_row = 0;
  std::size_t grid_col = 0;
  TierDecision decision;
  double arrival_s = 0;  // since feed start
  double start_s = 0;
  double done_s = 0;
  double lag_s() const { return done_s - arrival_s; }
};

struct StitchReport {
  MaskImage mask;
  std::vector<PatchLog> log;  // grid order
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  double rate = 0;
  std::size_t queue_depth = 0;
  std::size_t max_queue_depth = 0;
  std::size_t overflows = 0;  // arrivals that found the queue full
  double max_lag_s = 0;
  double mean_lag_s = 0;
  double wall_s = 0;
  std::size_t segmenter_calls = 0;
  bool contract_held = false;
  std::optional<ConfusionCounts> counts;  // against the truth mask, when given
};

namespace detail {

struct FeedItem {
  std::size_t index;
  Patch patch;
  double arrival_s;
};

}  // namespace detail

// Emit grid patches row-major at a fixed rate into a bounded queue and
// infer them on a consumer thread. The real-time contract holds when no
// arrival finds the queue full and every patch finishes within
// queue_depth / rate seconds of arriving.
inline StitchReport simulate_feed(const RasterImage& image, const std::optional<MaskImage>& truth,
                                  const TwoTier& model, const FeedConfig& cfg = {}) {
  require(cfg.rate > 0 && std::isfinite(cfg.rate), ErrorCode::config, "feed rate must be > 0");
  require(cfg.queue_depth >= 1, ErrorCode::config, "queue depth must be >= 1");
  if (truth)
    require(truth->height == image.height && truth->width == image.width, ErrorCode::shape_mismatch,
            "truth mask dimensions differ from image");
  const auto patches = image_grid(image, cfg.patch_size);
  require(!patches.empty(), ErrorCode::invalid_argument, "image smaller than one patch");

  StitchReport rep;
  rep.grid_rows = image.height / cfg.patch_size;
  rep.grid_cols = image.width / cfg.patch_size;
  rep.rate = cfg.rate;
  rep.queue_depth = cfg.queue_depth;
  rep.log.resize(patches.size());
  std::vector<MaskPatch> tiles(patches.size());
  const std::size_t calls_before = model.segmenter_calls();

  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  auto since = [&](clock::time_point t) { return std::chrono::duration<double>(t - t0).count(); };
  auto due = [&](std::size_t k) {
    return t0 + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(static_cast<double>(k) / cfg.rate));
  };
  auto process = [&](detail::FeedItem item) {
    auto& log = rep.log[item.index];
    log.index = item.index;
    log.grid_row = item.index / rep.grid_cols;
    log.grid_col = item.index % rep.grid_cols;
    log.arrival_s = item.arrival_s;
    log.start_s = since(clock::now());
    auto out = model.infer(item.patch);
    log.done_s = since(clock::now());
    log.decision = out.decision;
    tiles[item.index] = std::move(out.mask);
  };

  if (cfg.threaded) {
    BoundedQueue<detail::FeedItem> queue(cfg.queue_depth);
    std::thread consumer([&] {
      while (auto item = queue.pop()) process(std::move(*item));
    });
    for (std::size_t k = 0; k < patches.size(); ++k) {
      std::this_thread::sleep_until(due(k));
      detail::FeedItem item{k, patches[k], since(clock::now())};
      if (!queue.try_push(item)) {
        ++rep.overflows;
        queue.push(std::move(item));
      }
    }
    queue.close();
    consumer.join();
    rep.max_queue_depth = queue.high_water();
  } else {
    for (std::size_t k = 0; k < patches.size(); ++k) {
      // A patch that is already due when inference frees up counts as queued.
      std::size_t waiting = 0;
      while (k + waiting < patches.size() && due(k + waiting) <= clock::now()) ++waiting;
      rep.max_queue_depth = std::max(rep.max_queue_depth, waiting);
      if (waiting > cfg.queue_depth) ++rep.overflows;
      std::this_thread::sleep_until(due(k));
      process({k, patches[k], since(due(k))});
    }
  }
  rep.wall_s = since(clock::now());
  rep.segmenter_calls = model.segmenter_calls() - calls_before;

  double lag_sum = 0;
  for (const auto& l : rep.log) {
    rep.max_lag_s = std::max(rep.max_lag_s, l.lag_s());
    lag_sum += l.lag_s();
  }
  rep.mean_lag_s = lag_sum / static_cast<double>(rep.log.size());
  rep.contract_held = rep.overflows == 0 && rep.max_queue_depth <= cfg.queue_depth &&
                      rep.max_lag_s <= static_cast<double>(cfg.queue_depth) / cfg.rate;
  rep.mask = stitch(tiles, image.height, image.width, cfg.patch_size);
  if (truth) rep.counts = confusion(rep.mask.data, truth->data);
  return rep;
}

inline nlohmann::json decision_json(const TierDecision& d) {
  return {{"classifier_prob", d.classifier_prob ? nlohmann::json(*d.classifier_prob) : nlohmann::json(nullptr)},
          {"gated", d.gated},
          {"segmentation_invoked", d.segmentation_invoked},
          {"classifier_ms", d.classifier_ms},
          {"segmenter_ms", d.segmenter_ms}};
}

inline nlohmann::json report_json(const StitchReport& r) {
  nlohmann::json decisions = nlohmann::json::array();
  for (const auto& l : r.log) {
    auto j = decision_json(l.decision);
    j["index"] = l.index;
    j["grid_row"] = l.grid_row;
    j["grid_col"] = l.grid_col;
    j["arrival_s"] = l.arrival_s;
    j["start_s"] = l.start_s;
    j["done_s"] = l.done_s;
    decisions.push_back(std::move(j));
  }
  nlohmann::json j = {{"height", r.mask.height},
                      {"width", r.mask.width},
                      {"grid_rows", r.grid_rows},
                      {"grid_cols", r.grid_cols},
                      {"rate", r.rate},
                      {"queue_depth", r.queue_depth},
                      {"max_queue_depth", r.max_queue_depth},
                      {"overflows", r.overflows},
                      {"max_lag_s", r.max_lag_s},
                      {"mean_lag_s", r.mean_lag_s},
                      {"wall_s", r.wall_s},
                      {"segmenter_calls", r.segmenter_calls},
                      {"contract_held", r.contract_held},
                      {"decisions", std::move(decisions)}};
  if (r.counts) j["metrics"] = report_json(make_report("two-tier", *r.counts, true, 0, r.log.size()));
  return j;
}

// Mask in the raster-io container plus the decision log as JSON alongside.
inline void write_stitch_report(const StitchReport& r, const std::filesystem::path& dir, bool preview = false) {
  std::filesystem::create_directories(dir);
  write_mask(r.mask, dir / "stitched.mask");
  if (preview) write_mask_preview(r.mask, dir / "stitched_preview.mask");
  std::ofstream os(dir / "stitch_report.json");
  require(static_cast<bool>(os), ErrorCode::io, "cannot write " + (dir / "stitch_report.json").string());
  os << report_json(r).dump(2) << '\n';
}

}  // namespace firescan
