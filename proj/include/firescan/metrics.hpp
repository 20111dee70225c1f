#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "firescan/error.hpp"

namespace firescan {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const noexcept { return tp + fp + fn + tn; }

  // Single-element update; pred/truth are 0 or 1.
  void add(bool pred, bool truth) noexcept {
    if (pred)
      truth ? ++tp : ++fp;
    else
      truth ? ++fn : ++tn;
  }

  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) noexcept { return a += b; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  require(pred.size() == truth.size(), ErrorCode::shape_mismatch, "confusion: prediction/truth size mismatch");
  ConfusionCounts c;
  // Branch-free accumulation over the four cells.
  std::uint64_t sp = 0, st = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const unsigned p = pred[i], t = truth[i];
    require(p <= 1 && t <= 1, ErrorCode::mask_value, "confusion: non-binary value");
    sp += p;
    st += t;
    both += p & t;
  }
  c.tp = both;
  c.fp = sp - both;
  c.fn = st - both;
  c.tn = pred.size() - sp - st + both;
  return c;
}

// Undefined metrics (zero denominators) are std::nullopt.
struct Metrics {
  std::optional<double> accuracy;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> iou;
};

inline Metrics metrics_from_counts(const ConfusionCounts& c) {
  auto ratio = [](std::uint64_t num, std::uint64_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  return {ratio(c.tp + c.tn, c.total()), ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn),
          ratio(c.tp, c.tp + c.fp + c.fn)};
}

// Per-image (macro) average; each metric averages only its defined values.
inline Metrics macro_average(std::span<const ConfusionCounts> per_image) {
  auto avg = [&](auto getter) -> std::optional<double> {
    double s = 0;
    std::size_t n = 0;
    for (const auto& c : per_image)
      if (auto v = getter(metrics_from_counts(c))) {
        s += *v;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
  };
  return {avg([](const Metrics& m) { return m.accuracy; }), avg([](const Metrics& m) { return m.precision; }),
          avg([](const Metrics& m) { return m.recall; }), avg([](const Metrics& m) { return m.iou; })};
}

struct TimingStats {
  std::size_t count = 0;
  double mean_ms = 0;
  double p50_ms = 0;
  double p95_ms = 0;
  double min_ms = 0;
  double max_ms = 0;

  double fps() const { return mean_ms > 0 ? 1000.0 / mean_ms : 0.0; }
};

// Linear-interpolated percentile of sorted samples, q in [0,1].
inline double percentile_sorted(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * f;
}

inline TimingStats timing_stats(std::span<const double> samples_ms) {
  require(!samples_ms.empty(), ErrorCode::invalid_argument, "timing_stats: no samples");
  std::vector<double> s(samples_ms.begin(), samples_ms.end());
  for (double v : s) require(std::isfinite(v) && v >= 0, ErrorCode::invalid_argument, "timing_stats: bad sample");
  std::sort(s.begin(), s.end());
  TimingStats t;
  t.count = s.size();
  double sum = 0;
  for (double v : s) sum += v;
  t.mean_ms = sum / static_cast<double>(s.size());
  // Constant samples: report the exact value rather than a rounded mean.
  if (s.front() == s.back()) t.mean_ms = s.front();
  t.p50_ms = percentile_sorted(s, 0.5);
  t.p95_ms = percentile_sorted(s, 0.95);
  t.min_ms = s.front();
  t.max_ms = s.back();
  return t;
}

// One row of the results table: accuracy, precision, recall, IoU, inference time.
struct EvalReport {
  std::string method;
  ConfusionCounts counts;
  Metrics metrics;
  bool pixel_level = false;  // classifier rows are patch-level and carry no IoU
  double mean_inference_ms = 0;
  std::size_t patches_evaluated = 0;
};

inline EvalReport make_report(std::string method, const ConfusionCounts& counts, bool pixel_level,
                              double mean_inference_ms, std::size_t patches) {
  EvalReport r{std::move(method), counts, metrics_from_counts(counts), pixel_level, mean_inference_ms, patches};
  if (!pixel_level) r.metrics.iou.reset();
  return r;
}

inline std::string format_metric(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(6);
  os << *v;
  return os.str();
}

inline std::string report_csv_header() { return "method,accuracy,precision,recall,iou,inference_ms,patches"; }

inline std::string report_csv_row(const EvalReport& r) {
  std::ostringstream os;
  os << r.method << ',' << format_metric(r.metrics.accuracy) << ',' << format_metric(r.metrics.precision) << ','
     << format_metric(r.metrics.recall) << ',' << format_metric(r.metrics.iou) << ',';
  if (r.mean_inference_ms > 0) os << r.mean_inference_ms;
  os << ',' << r.patches_evaluated;
  return os.str();
}

inline std::string reports_csv(std::span<const EvalReport> rows) {
  std::string out = report_csv_header() + "\n";
  for (const auto& r : rows) out += report_csv_row(r) + "\n";
  return out;
}

inline nlohmann::json report_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"method", r.method},
          {"accuracy", opt(r.metrics.accuracy)},
          {"precision", opt(r.metrics.precision)},
          {"recall", opt(r.metrics.recall)},
          {"iou", opt(r.metrics.iou)},
          {"inference_ms", r.mean_inference_ms},
          {"patches", r.patches_evaluated},
          {"counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}}}};
}

inline nlohmann::json timing_json(const TimingStats& t) {
  return {{"count", t.count}, {"mean_ms", t.mean_ms}, {"p50_ms", t.p50_ms}, {"p95_ms", t.p95_ms},
          {"min_ms", t.min_ms}, {"max_ms", t.max_ms}, {"fps", t.fps()}};
}

}  // namespace firescan
