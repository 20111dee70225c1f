#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "firescan/dataset.hpp"
#include "firescan/error.hpp"
#include "firescan/metrics.hpp"
#include "firescan/nn.hpp"
#include "firescan/random.hpp"
#include "firescan/raster_io.hpp"
#include "firescan/tensor.hpp"

namespace firescan {

enum class NetworkKind { classifier, segmenter };

inline std::string to_string(NetworkKind k) { return k == NetworkKind::classifier ? "classifier" : "segmenter"; }

inline NetworkKind network_kind_from_string(const std::string& s) {
  if (s == "classifier") return NetworkKind::classifier;
  if (s == "segmenter") return NetworkKind::segmenter;
  throw Error(ErrorCode::config, "unknown network kind '" + s + "'");
}

inline std::vector<int> all_bands(std::size_t n = 12) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 1);
  return v;
}

struct NetworkSpec {
  NetworkKind kind = NetworkKind::classifier;
  std::vector<int> bands = all_bands();  // input channels, in order
  std::vector<std::size_t> widths;       // encoder stage widths
  std::size_t kernel = 3;

  std::size_t in_channels() const { return bands.size(); }

  static NetworkSpec classifier(std::vector<int> bands = all_bands()) {
    return {NetworkKind::classifier, std::move(bands), {16, 32, 64}, 3};
  }
  static NetworkSpec segmenter(std::vector<int> bands = all_bands()) {
    return {NetworkKind::segmenter, std::move(bands), {64, 128}, 3};
  }
};

inline void validate(const NetworkSpec& s) {
  require(s.in_channels() >= 1, ErrorCode::config, "network needs at least one input channel");
  require(s.kernel % 2 == 1, ErrorCode::config, "kernel size must be odd");
  const std::size_t stages = s.kind == NetworkKind::classifier ? 3 : 2;
  require(s.widths.size() == stages, ErrorCode::config,
          to_string(s.kind) + " needs exactly " + std::to_string(stages) + " encoder widths");
  for (auto w : s.widths) require(w >= 1, ErrorCode::config, "stage width must be >= 1");
}

// Closed-form trainable parameter count (running statistics excluded).
inline std::size_t expected_parameter_count(const NetworkSpec& s) {
  std::size_t n = 0, c = s.in_channels();
  for (auto w : s.widths) {
    n += c * w * s.kernel * s.kernel + w + 2 * w;
    c = w;
  }
  if (s.kind == NetworkKind::classifier) return n + c + 1;
  const std::size_t w1 = s.widths[0], w2 = s.widths[1];
  return n + (w2 * w1 * 4 + w1) + (2 * w1 * 1 * 4 + 1);
}

namespace detail {

// conv -> ReLU -> batch-norm -> 2x2 max-pool.
struct EncoderStage {
  Tensor conv_w, conv_b, bn_gamma, bn_beta, bn_mean, bn_var;
  nn::ConvGeometry geom;

  EncoderStage() = default;
  EncoderStage(std::size_t in, std::size_t out, std::size_t k, Rng& rng)
      : conv_w({out, in, k, k}), conv_b({out}), bn_gamma({out}, 1.0f), bn_beta({out}), bn_mean({out}),
        bn_var({out}, 1.0f), geom{1, k / 2} {
    nn::he_uniform(conv_w, in * k * k, rng);
  }
};

struct StageCache {
  Tensor input;
  Tensor conv_out;
  nn::BatchNormCache<float> bn;
  Shape bn_out_shape;
  std::vector<std::uint32_t> pool_idx;
};

inline Tensor stage_forward(const EncoderStage& s, const Tensor& x, StageCache* cache) {
  Tensor z = nn::conv2d_forward(x, s.conv_w, s.conv_b, s.geom);
  if (!cache) {
    Tensor p = nn::relu_bn_pool_infer(z, s.bn_gamma, s.bn_beta, s.bn_mean, s.bn_var, 1e-5);
    debug_check_finite(p, "encoder stage");
    return p;
  }
  Tensor a = nn::relu_forward(z);
  Tensor b = nn::batch_norm_forward(a, s.bn_gamma, s.bn_beta, s.bn_mean, s.bn_var, nn::Mode::train, 1e-5, &cache->bn);
  Tensor p = nn::max_pool2_forward(b, &cache->pool_idx);
  cache->input = x;
  cache->bn_out_shape = b.shape();
  cache->conv_out = std::move(z);
  debug_check_finite(p, "encoder stage");
  return p;
}

inline void accumulate(Tensor& param, const Tensor& g) {
  param.ensure_grad();
  auto dst = param.grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

inline Tensor stage_backward(EncoderStage& s, const StageCache& c, const Tensor& dp, bool need_dx) {
  Tensor db = nn::max_pool2_backward(dp, c.pool_idx, c.bn_out_shape);
  auto bn = nn::batch_norm_backward(db, s.bn_gamma, c.bn);
  accumulate(s.bn_gamma, bn.dw);
  accumulate(s.bn_beta, bn.db);
  Tensor dz = nn::relu_backward(c.conv_out, bn.dx);
  auto conv = nn::conv2d_backward(c.input, s.conv_w, dz, s.geom, need_dx);
  accumulate(s.conv_w, conv.dw);
  accumulate(s.conv_b, conv.db);
  return std::move(conv.dx);
}

inline void update_running(EncoderStage& s, const StageCache& c) {
  const auto& shp = c.conv_out.shape();
  nn::batch_norm_update_running(s.bn_mean, s.bn_var, c.bn, shp[0] * shp[2] * shp[3]);
}

inline void add_stage_tensors(const std::string& prefix, EncoderStage& s,
                              std::vector<std::pair<std::string, Tensor*>>& params,
                              std::vector<std::pair<std::string, Tensor*>>& buffers) {
  params.emplace_back(prefix + ".conv.weight", &s.conv_w);
  params.emplace_back(prefix + ".conv.bias", &s.conv_b);
  params.emplace_back(prefix + ".bn.gamma", &s.bn_gamma);
  params.emplace_back(prefix + ".bn.beta", &s.bn_beta);
  buffers.emplace_back(prefix + ".bn.running_mean", &s.bn_mean);
  buffers.emplace_back(prefix + ".bn.running_var", &s.bn_var);
}

inline Tensor vector_tensor(const std::vector<float>& v) { return Tensor({v.size()}, v); }

}  // namespace detail

using NamedParams = std::vector<std::pair<std::string, Tensor*>>;

// Shared parameter bookkeeping and checkpoint (de)serialization.
template <typename Derived>
class NetworkBase {
 public:
  const NetworkSpec& spec() const noexcept { return spec_; }

  NamedParams parameters() {
    NamedParams p, b;
    self().collect(p, b);
    return p;
  }
  NamedParams buffers() {
    NamedParams p, b;
    self().collect(p, b);
    return b;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : const_cast<Derived&>(self()).parameters()) n += t->size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : parameters()) {
      t->ensure_grad();
      t->zero_grad();
    }
  }

  NamedTensors to_named_tensors() const {
    NamedTensors out;
    std::vector<float> meta_widths(spec_.widths.begin(), spec_.widths.end());
    std::vector<float> meta_bands(spec_.bands.begin(), spec_.bands.end());
    out.emplace_back("meta.kind", detail::vector_tensor({spec_.kind == NetworkKind::classifier ? 0.0f : 1.0f}));
    out.emplace_back("meta.widths", detail::vector_tensor(meta_widths));
    out.emplace_back("meta.bands", detail::vector_tensor(meta_bands));
    out.emplace_back("meta.kernel", detail::vector_tensor({static_cast<float>(spec_.kernel)}));
    auto& mut = const_cast<Derived&>(self());
    for (auto& [name, t] : mut.parameters()) out.emplace_back(name, Tensor(t->shape(), t->to_vector()));
    for (auto& [name, t] : mut.buffers()) out.emplace_back(name, Tensor(t->shape(), t->to_vector()));
    return out;
  }

  void load_named_tensors(const NamedTensors& named) {
    auto load = [&](const std::string& name, Tensor* dst) {
      const Tensor* src = find_tensor(named, name);
      require(src != nullptr, ErrorCode::data, "checkpoint missing tensor '" + name + "'");
      require(src->shape() == dst->shape(), ErrorCode::shape_mismatch,
              "checkpoint tensor '" + name + "' has shape " + shape_string(src->shape()) + ", expected " +
                  shape_string(dst->shape()));
      std::copy(src->values().begin(), src->values().end(), dst->values().begin());
    };
    for (auto& [name, t] : parameters()) load(name, t);
    for (auto& [name, t] : buffers()) load(name, t);
  }

 protected:
  NetworkSpec spec_;

 private:
  Derived& self() { return static_cast<Derived&>(*this); }
  const Derived& self() const { return static_cast<const Derived&>(*this); }
};

// Three encoder stages, global max pool, dense(1) + sigmoid.
class Classifier : public NetworkBase<Classifier> {
 public:
  explicit Classifier(NetworkSpec spec = NetworkSpec::classifier(), std::uint64_t seed = 0) {
    require(spec.kind == NetworkKind::classifier, ErrorCode::config, "spec is not a classifier");
    validate(spec);
    spec_ = std::move(spec);
    Rng rng(seed);
    std::size_t c = spec_.in_channels();
    for (auto w : spec_.widths) {
      stages_.emplace_back(c, w, spec_.kernel, rng);
      c = w;
    }
    dense_w_ = Tensor({c, 1});
    dense_b_ = Tensor({1});
    nn::he_uniform(dense_w_, c, rng);
  }

  Tensor& dense_weight() { return dense_w_; }
  Tensor& dense_bias() { return dense_b_; }

  // Probabilities, shape {N}. Inference mode, no caching.
  Tensor infer(const Tensor& x) const {
    Tensor logits = logits_impl(x, nullptr);
    Tensor p = nn::sigmoid_forward(logits);
    return p.reshaped({x.dim(0)});
  }

  // Train-mode logits {N, 1}; caches activations for backward().
  Tensor forward_train(const Tensor& x) {
    cache_ = Cache{};
    cache_.stages.resize(stages_.size());
    return logits_impl(x, &cache_);
  }

  void backward(const Tensor& dlogits) {
    auto dense = nn::dense_backward(cache_.pooled, dense_w_, dlogits);
    detail::accumulate(dense_w_, dense.dw);
    detail::accumulate(dense_b_, dense.db);
    Tensor d = nn::global_max_pool_backward(dense.dx, cache_.gmp_idx, cache_.encoded_shape);
    for (std::size_t i = stages_.size(); i-- > 0;) d = detail::stage_backward(stages_[i], cache_.stages[i], d, i > 0);
    for (std::size_t i = 0; i < stages_.size(); ++i) detail::update_running(stages_[i], cache_.stages[i]);
  }

  void collect(NamedParams& params, NamedParams& buffers) {
    for (std::size_t i = 0; i < stages_.size(); ++i)
      detail::add_stage_tensors("enc" + std::to_string(i + 1), stages_[i], params, buffers);
    params.emplace_back("head.dense.weight", &dense_w_);
    params.emplace_back("head.dense.bias", &dense_b_);
  }

 private:
  struct Cache {
    std::vector<detail::StageCache> stages;
    Shape encoded_shape;
    std::vector<std::uint32_t> gmp_idx;
    Tensor pooled;
  };

  Tensor logits_impl(const Tensor& x, Cache* cache) const {
    require(x.rank() == 4 && x.dim(1) == spec_.in_channels(), ErrorCode::shape_mismatch,
            "classifier expects N x " + std::to_string(spec_.in_channels()) + " x H x W input, got " +
                shape_string(x.shape()));
    require(x.dim(2) % 8 == 0 && x.dim(3) % 8 == 0, ErrorCode::shape_mismatch,
            "classifier input spatial dims must be divisible by 8");
    Tensor h = x;
    for (std::size_t i = 0; i < stages_.size(); ++i)
      h = detail::stage_forward(stages_[i], h, cache ? &cache->stages[i] : nullptr);
    Tensor pooled = nn::global_max_pool_forward(h, cache ? &cache->gmp_idx : nullptr);
    Tensor logits = nn::dense_forward(pooled, dense_w_, dense_b_);
    if (cache) {
      cache->encoded_shape = h.shape();
      cache->pooled = std::move(pooled);
    }
    return logits;
  }

  std::vector<detail::EncoderStage> stages_;
  Tensor dense_w_, dense_b_;
  Cache cache_;
};

// Two encoder stages to an (H/4 x W/4 x w2) bottleneck, then two stride-2
// transposed convolutions. The second decoder stage concatenates the first
// encoder stage's output (skip connection) before upsampling.
class Segmenter : public NetworkBase<Segmenter> {
 public:
  explicit Segmenter(NetworkSpec spec = NetworkSpec::segmenter(), std::uint64_t seed = 0) {
    require(spec.kind == NetworkKind::segmenter, ErrorCode::config, "spec is not a segmenter");
    validate(spec);
    spec_ = std::move(spec);
    Rng rng(seed);
    const std::size_t w1 = spec_.widths[0], w2 = spec_.widths[1];
    enc1_ = detail::EncoderStage(spec_.in_channels(), w1, spec_.kernel, rng);
    enc2_ = detail::EncoderStage(w1, w2, spec_.kernel, rng);
    dec1_w_ = Tensor({w2, w1, 2, 2});
    dec1_b_ = Tensor({w1});
    dec2_w_ = Tensor({2 * w1, 1, 2, 2});
    dec2_b_ = Tensor({1});
    nn::he_uniform(dec1_w_, w2, rng);
    nn::he_uniform(dec2_w_, 2 * w1, rng);
  }

  // Probabilities N x 1 x H x W. `zero_skip` feeds zeros in place of the
  // skip activation (diagnostics only).
  Tensor infer(const Tensor& x, bool zero_skip = false) const {
    return nn::sigmoid_forward(logits_impl(x, nullptr, zero_skip));
  }

  // Spatial shape of the encoding for an input of the given size.
  Tensor bottleneck(const Tensor& x) const {
    check_input(x);
    return detail::stage_forward(enc2_, detail::stage_forward(enc1_, x, nullptr), nullptr);
  }

  Tensor forward_train(const Tensor& x) {
    cache_ = Cache{};
    return logits_impl(x, &cache_, false);
  }

  void backward(const Tensor& dlogits) {
    auto d2 = nn::transposed_conv2d_backward(cache_.cat, dec2_w_, dlogits, kUp);
    detail::accumulate(dec2_w_, d2.dw);
    detail::accumulate(dec2_b_, d2.db);
    auto [dr1, dskip] = nn::split_channels(d2.dx, spec_.widths[0]);
    Tensor du1 = nn::relu_backward(cache_.up1, dr1);
    auto d1 = nn::transposed_conv2d_backward(cache_.bottleneck, dec1_w_, du1, kUp);
    detail::accumulate(dec1_w_, d1.dw);
    detail::accumulate(dec1_b_, d1.db);
    Tensor ds1 = detail::stage_backward(enc2_, cache_.enc2, d1.dx, true);
    for (std::size_t i = 0; i < ds1.size(); ++i) ds1[i] += dskip[i];
    detail::stage_backward(enc1_, cache_.enc1, ds1, false);
    detail::update_running(enc1_, cache_.enc1);
    detail::update_running(enc2_, cache_.enc2);
  }

  void collect(NamedParams& params, NamedParams& buffers) {
    detail::add_stage_tensors("enc1", enc1_, params, buffers);
    detail::add_stage_tensors("enc2", enc2_, params, buffers);
    params.emplace_back("dec1.tconv.weight", &dec1_w_);
    params.emplace_back("dec1.tconv.bias", &dec1_b_);
    params.emplace_back("dec2.tconv.weight", &dec2_w_);
    params.emplace_back("dec2.tconv.bias", &dec2_b_);
  }

 private:
  static constexpr nn::ConvGeometry kUp{2, 0};

  struct Cache {
    detail::StageCache enc1, enc2;
    Tensor bottleneck;
    Tensor up1;
    Tensor cat;
  };

  void check_input(const Tensor& x) const {
    require(x.rank() == 4 && x.dim(1) == spec_.in_channels(), ErrorCode::shape_mismatch,
            "segmenter expects N x " + std::to_string(spec_.in_channels()) + " x H x W input, got " +
                shape_string(x.shape()));
    require(x.dim(2) % 4 == 0 && x.dim(3) % 4 == 0, ErrorCode::shape_mismatch,
            "segmenter input spatial dims must be divisible by 4");
  }

  Tensor logits_impl(const Tensor& x, Cache* cache, bool zero_skip) const {
    check_input(x);
    Tensor s1 = detail::stage_forward(enc1_, x, cache ? &cache->enc1 : nullptr);
    Tensor b = detail::stage_forward(enc2_, s1, cache ? &cache->enc2 : nullptr);
    Tensor u1 = nn::transposed_conv2d_forward(b, dec1_w_, dec1_b_, kUp);
    Tensor r1 = nn::relu_forward(u1);
    if (zero_skip) s1.fill(0.0f);
    Tensor cat = nn::concat_channels(r1, s1);
    Tensor logits = nn::transposed_conv2d_forward(cat, dec2_w_, dec2_b_, kUp);
    if (cache) {
      cache->bottleneck = std::move(b);
      cache->up1 = std::move(u1);
      cache->cat = std::move(cat);
    }
    debug_check_finite(logits, "segmenter");
    return logits;
  }

  detail::EncoderStage enc1_, enc2_;
  Tensor dec1_w_, dec1_b_, dec2_w_, dec2_b_;
  Cache cache_;
};

// ---- checkpoints -------------------------------------------------------

inline NetworkSpec spec_from_named_tensors(const NamedTensors& named) {
  auto get = [&](const char* name) -> const Tensor& {
    const Tensor* t = find_tensor(named, name);
    require(t != nullptr, ErrorCode::data, std::string("checkpoint missing ") + name);
    return *t;
  };
  NetworkSpec s;
  s.kind = get("meta.kind")[0] == 0.0f ? NetworkKind::classifier : NetworkKind::segmenter;
  s.widths.clear();
  for (float v : get("meta.widths").values()) s.widths.push_back(static_cast<std::size_t>(v));
  s.bands.clear();
  for (float v : get("meta.bands").values()) s.bands.push_back(static_cast<int>(v));
  s.kernel = static_cast<std::size_t>(get("meta.kernel")[0]);
  validate(s);
  return s;
}

template <typename Net>
Net network_from_named_tensors(const NamedTensors& named) {
  Net net(spec_from_named_tensors(named));
  net.load_named_tensors(named);
  return net;
}

template <typename Net>
void save_network(const Net& net, const std::filesystem::path& path) {
  save_checkpoint(net.to_named_tensors(), path);
}

template <typename Net>
Net load_network(const std::filesystem::path& path) {
  return network_from_named_tensors<Net>(load_checkpoint(path));
}

// ---- training ----------------------------------------------------------

struct TrainConfig {
  double lr = 7.5e-4;
  std::size_t epochs = 500;
  std::size_t batch_size = 8;
  double positive_weight = 1.0;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  double threshold = 0.5;
  // Stop once the monitored metric reaches this value.
  std::optional<double> target_metric;
  // Stop after this many epochs without improvement (0 = never).
  std::size_t patience = 0;
  // Multiplier applied to lr at each epoch (constant lr when empty).
  std::function<double(std::size_t)> lr_schedule;

  static TrainConfig classifier_defaults() { return {}; }
  static TrainConfig segmenter_defaults() {
    TrainConfig c;
    c.lr = 3e-4;
    c.positive_weight = 50.0;
    c.patience = 50;
    return c;
  }
};

inline void validate(const TrainConfig& c) {
  require(c.lr > 0, ErrorCode::config, "lr must be > 0");
  require(c.epochs >= 1, ErrorCode::config, "epochs must be >= 1");
  require(c.batch_size >= 1, ErrorCode::config, "batch_size must be >= 1");
  require(c.positive_weight > 0, ErrorCode::config, "positive_weight must be > 0");
  require(c.val_fraction >= 0 && c.val_fraction < 1, ErrorCode::config, "val_fraction must be in [0,1)");
}

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0;
  // Monitored metrics (validation split when present, else training split).
  std::optional<double> accuracy;
  std::optional<double> iou;
};

struct TrainResult {
  std::vector<EpochRecord> curve;
  std::size_t best_epoch = 0;
  NamedTensors checkpoint;
  bool used_validation = false;
};

inline std::string curve_csv(const std::vector<EpochRecord>& curve) {
  std::string out = "epoch,loss,acc,iou\n";
  for (const auto& r : curve) {
    std::ostringstream os;
    os.precision(8);
    os << r.epoch << ',' << r.loss << ',' << format_metric(r.accuracy) << ',' << format_metric(r.iou) << '\n';
    out += os.str();
  }
  return out;
}

// Channel-select the split to the network's input bands when needed.
inline DatasetSplit inputs_for(const DatasetSplit& split, const NetworkSpec& spec) {
  if (split.patches.empty() || split.patches.front().image.band_indices == spec.bands) return split;
  return select_channels(split, spec.bands);
}

namespace detail {

template <typename Net>
constexpr bool is_classifier = std::is_same_v<Net, Classifier>;

template <typename Net>
Tensor batch_targets(const std::vector<PatchPair>& patches, std::span<const std::size_t> idx) {
  if constexpr (is_classifier<Net>) {
    Tensor t({idx.size(), 1});
    for (std::size_t k = 0; k < idx.size(); ++k)
      t[k] = patches[idx[k]].image.label == PatchLabel::positive ? 1.0f : 0.0f;
    return t;
  } else {
    const std::size_t s = patches[idx[0]].mask.size;
    Tensor t({idx.size(), 1, s, s});
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::transform(patches[idx[k]].mask.data.begin(), patches[idx[k]].mask.data.end(), t.data() + k * s * s,
                     [](std::uint8_t v) { return static_cast<float>(v); });
    return t;
  }
}

// Confusion counts of thresholded predictions (strict >) against truth.
template <typename Net>
ConfusionCounts count_batch(const Tensor& probs, const std::vector<PatchPair>& patches,
                            std::span<const std::size_t> idx, double threshold) {
  ConfusionCounts c;
  if constexpr (is_classifier<Net>) {
    for (std::size_t k = 0; k < idx.size(); ++k)
      c.add(probs[k] > threshold, patches[idx[k]].image.label == PatchLabel::positive);
  } else {
    const std::size_t plane = patches[idx[0]].mask.size * patches[idx[0]].mask.size;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& truth = patches[idx[k]].mask.data;
      for (std::size_t i = 0; i < plane; ++i) c.add(probs[k * plane + i] > threshold, truth[i] != 0);
    }
  }
  return c;
}

template <typename Net>
ConfusionCounts count_split(const Net& net, const DatasetSplit& split, double threshold, std::size_t batch) {
  ConfusionCounts c;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < split.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(split.size(), start + batch); ++i) idx.push_back(i);
    c += count_batch<Net>(net.infer(batch_images(split.patches, idx)), split.patches, idx, threshold);
  }
  return c;
}

template <typename Net>
std::optional<double> monitored_metric(const Metrics& m) {
  return is_classifier<Net> ? m.accuracy : m.iou;
}

}  // namespace detail

// Train with Adam. The classifier trains on an oversampled copy of the
// training flights; the segmenter trains on positive patches only. A share
// of flights (val_fraction) is held out to select the best epoch. On return
// the network holds the best epoch's parameters.
template <typename Net>
TrainResult train(Net& net, const DatasetSplit& split, const TrainConfig& cfg) {
  validate(cfg);
  require(!split.patches.empty(), ErrorCode::data, "training split is empty");
  const DatasetSplit inputs = inputs_for(split, net.spec());
  auto [train_part, val_part] = split_by_source(inputs, cfg.val_fraction, mix_seed(cfg.seed, 1));

  DatasetSplit fit_set, monitor_set;
  if constexpr (detail::is_classifier<Net>) {
    fit_set = oversample_positives(train_part, mix_seed(cfg.seed, 2));
    monitor_set = val_part.patches.empty() ? train_part : val_part;
  } else {
    auto positives_only = [](const DatasetSplit& s) {
      DatasetSplit out;
      out.split = s.split;
      for (const auto& p : s.patches)
        if (p.image.label == PatchLabel::positive) out.patches.push_back(p);
      return out;
    };
    fit_set = positives_only(train_part);
    require(!fit_set.patches.empty(), ErrorCode::data, "segmenter training needs positive patches");
    monitor_set = positives_only(val_part);
    if (monitor_set.patches.empty()) monitor_set = fit_set;
  }

  TrainResult result;
  result.used_validation = !val_part.patches.empty();
  nn::AdamState adam;
  adam.lr = cfg.lr;
  const nn::LossConfig loss_cfg{cfg.positive_weight};
  std::vector<Tensor*> params;
  for (auto& [name, t] : net.parameters()) params.push_back(t);

  std::vector<std::size_t> order(fit_set.size());
  std::optional<double> best;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.lr_schedule) adam.lr = cfg.lr * cfg.lr_schedule(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(cfg.seed, 1000 + epoch));
    shuffle(order, rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor x = batch_images(fit_set.patches, idx);
      const Tensor y = detail::batch_targets<Net>(fit_set.patches, idx);
      net.zero_grad();
      const Tensor logits = net.forward_train(x);
      auto lg = nn::weighted_bce_with_logits(logits, y, loss_cfg);
      net.backward(lg.grad);
      nn::adam_step(params, adam);
      loss_sum += lg.loss;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    const Metrics m = metrics_from_counts(detail::count_split(net, monitor_set, cfg.threshold, cfg.batch_size));
    rec.accuracy = m.accuracy;
    if constexpr (!detail::is_classifier<Net>) rec.iou = m.iou;
    result.curve.push_back(rec);

    const double score = detail::monitored_metric<Net>(m).value_or(0.0);
    if (!best || score > *best) {
      best = score;
      result.best_epoch = epoch;
      result.checkpoint = net.to_named_tensors();
      since_best = 0;
    } else {
      ++since_best;
    }
    if (cfg.target_metric && score >= *cfg.target_metric) break;
    if (cfg.patience > 0 && since_best >= cfg.patience) break;
  }
  net.load_named_tensors(result.checkpoint);
  return result;
}

// Evaluate in inference mode. Classifier: patch-level counts; segmenter:
// pixel-level counts. Each patch is timed individually (batch of one).
template <typename Net>
EvalReport evaluate(const Net& net, const DatasetSplit& split, double threshold = 0.5, std::string method = "") {
  require(!split.patches.empty(), ErrorCode::data, "evaluation split is empty");
  const DatasetSplit inputs = inputs_for(split, net.spec());
  ConfusionCounts counts;
  double total_ms = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t idx[1] = {i};
    const Tensor x = batch_images(inputs.patches, idx);
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor p = net.infer(x);
    total_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    counts += detail::count_batch<Net>(p, inputs.patches, idx, threshold);
  }
  if (method.empty()) method = to_string(net.spec().kind);
  return make_report(std::move(method), counts, !detail::is_classifier<Net>,
                     total_ms / static_cast<double>(inputs.size()), inputs.size());
}

}  // namespace firescan
