#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "firescan/error.hpp"
#include "firescan/random.hpp"
#include "firescan/raster_io.hpp"
#include "firescan/tensor.hpp"

namespace firescan {

inline constexpr std::size_t kPatchSize = 256;

enum class PatchLabel { negative, positive };
enum class SplitKind { train, test };

inline std::string to_string(PatchLabel l) { return l == PatchLabel::positive ? "positive" : "negative"; }
inline std::string to_string(SplitKind s) { return s == SplitKind::train ? "train" : "test"; }

inline SplitKind split_from_string(const std::string& s) {
  if (s == "train") return SplitKind::train;
  if (s == "test") return SplitKind::test;
  throw Error(ErrorCode::config, "unknown split '" + s + "'");
}

// Patch label rule: positive iff fire fraction is strictly above the
// threshold. A threshold of 0 means "any fire pixel".
struct LabelRule {
  double min_fire_fraction = 0.005;
};

struct Patch {
  Tensor data;                    // C x S x S, values in [0,1]
  std::vector<int> band_indices;  // 1-based band index of each channel
  std::string source_id;
  std::size_t row_off = 0;
  std::size_t col_off = 0;
  double fire_fraction = 0.0;
  PatchLabel label = PatchLabel::negative;

  std::size_t channels() const { return data.dim(0); }
  std::size_t size() const { return data.dim(1); }
};

struct MaskPatch {
  std::vector<std::uint8_t> data;  // S x S, row-major, {0,1}
  std::size_t size = 0;
  std::string source_id;
  std::size_t row_off = 0;
  std::size_t col_off = 0;
};

struct PatchPair {
  Patch image;
  MaskPatch mask;
};

struct DatasetSplit {
  std::vector<PatchPair> patches;
  SplitKind split = SplitKind::train;
  std::uint64_t rng_seed = 0;

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count_if(patches.begin(), patches.end(), [](const PatchPair& p) {
      return p.image.label == PatchLabel::positive;
    }));
  }
  std::size_t size() const { return patches.size(); }
};

inline std::pair<double, PatchLabel> label_patch(const MaskPatch& mask, const LabelRule& rule = {}) {
  std::size_t fire = 0;
  for (auto v : mask.data) {
    require(v <= 1, ErrorCode::mask_value, "mask patch value not in {0,1}");
    fire += v;
  }
  const double fraction = mask.data.empty() ? 0.0 : static_cast<double>(fire) / static_cast<double>(mask.data.size());
  return {fraction, fraction > rule.min_fire_fraction ? PatchLabel::positive : PatchLabel::negative};
}

// Cut one (Patch, MaskPatch) pair at the given offset.
inline PatchPair extract_patch(const RasterImage& image, const MaskImage& mask, std::size_t row_off,
                               std::size_t col_off, std::size_t size, const std::string& source_id,
                               const LabelRule& rule = {}) {
  require(row_off + size <= image.height && col_off + size <= image.width, ErrorCode::invalid_argument,
          "patch extends beyond image");
  PatchPair p;
  const std::size_t channels = image.band_count();
  p.image.data = Tensor({channels, size, size});
  for (std::size_t b = 0; b < channels; ++b) {
    p.image.band_indices.push_back(image.bands[b].index);
    for (std::size_t r = 0; r < size; ++r) {
      const float* src = &image.data[(b * image.height + row_off + r) * image.width + col_off];
      std::copy(src, src + size, p.image.data.data() + (b * size + r) * size);
    }
  }
  p.mask.size = size;
  p.mask.data.resize(size * size);
  for (std::size_t r = 0; r < size; ++r) {
    const auto* src = &mask.data[(row_off + r) * mask.width + col_off];
    std::copy(src, src + size, p.mask.data.begin() + static_cast<std::ptrdiff_t>(r * size));
  }
  p.image.source_id = p.mask.source_id = source_id;
  p.image.row_off = p.mask.row_off = row_off;
  p.image.col_off = p.mask.col_off = col_off;
  std::tie(p.image.fire_fraction, p.image.label) = label_patch(p.mask, rule);
  return p;
}

namespace detail {
inline void check_pair(const RasterImage& image, const MaskImage& mask) {
  require(image.units_state == UnitsState::normalized, ErrorCode::state, "patching requires a normalized image");
  require(mask.height == image.height && mask.width == image.width, ErrorCode::shape_mismatch,
          "mask dimensions differ from image dimensions");
}
}  // namespace detail

// Non-overlapping tiles in row-major order; right/bottom remainders dropped.
inline std::vector<PatchPair> grid_patches(const RasterImage& image, const MaskImage& mask,
                                           std::size_t size = kPatchSize, const std::string& source_id = "",
                                           const LabelRule& rule = {}) {
  detail::check_pair(image, mask);
  require(size > 0, ErrorCode::invalid_argument, "patch size must be positive");
  std::vector<PatchPair> out;
  for (std::size_t r = 0; r + size <= image.height; r += size)
    for (std::size_t c = 0; c + size <= image.width; c += size)
      out.push_back(extract_patch(image, mask, r, c, size, source_id, rule));
  return out;
}

inline std::vector<PatchPair> sample_random_patches(const RasterImage& image, const MaskImage& mask, std::size_t n,
                                                    std::uint64_t rng_seed, std::size_t size = kPatchSize,
                                                    const std::string& source_id = "", const LabelRule& rule = {}) {
  detail::check_pair(image, mask);
  require(image.height >= size && image.width >= size, ErrorCode::invalid_argument,
          "image smaller than patch size");
  Rng rng(rng_seed);
  std::vector<PatchPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<std::size_t>(uniform_index(rng, image.height - size + 1));
    const auto c = static_cast<std::size_t>(uniform_index(rng, image.width - size + 1));
    out.push_back(extract_patch(image, mask, r, c, size, source_id, rule));
  }
  return out;
}

// Duplicate positives (with replacement) until they are at least as many as
// the negatives. Originals keep their order; duplicates are appended.
inline DatasetSplit oversample_positives(const DatasetSplit& split, std::uint64_t rng_seed) {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < split.patches.size(); ++i)
    if (split.patches[i].image.label == PatchLabel::positive) pos.push_back(i);
  require(!pos.empty(), ErrorCode::data, "cannot oversample a split without positive patches");
  const std::size_t neg = split.patches.size() - pos.size();
  DatasetSplit out = split;
  Rng rng(rng_seed);
  for (std::size_t k = pos.size(); k < neg; ++k)
    out.patches.push_back(split.patches[pos[uniform_index(rng, pos.size())]]);
  return out;
}

namespace detail {
inline std::vector<std::size_t> channel_positions(const std::vector<int>& available, const std::vector<int>& subset) {
  std::set<int> seen;
  std::vector<std::size_t> pos;
  for (int idx : subset) {
    require(seen.insert(idx).second, ErrorCode::invalid_argument, "duplicate band index " + std::to_string(idx));
    auto it = std::find(available.begin(), available.end(), idx);
    require(it != available.end(), ErrorCode::invalid_argument,
            "band index " + std::to_string(idx) + " not available");
    pos.push_back(static_cast<std::size_t>(it - available.begin()));
  }
  return pos;
}
}  // namespace detail

inline Patch select_channels(const Patch& patch, const std::vector<int>& subset) {
  const auto pos = detail::channel_positions(patch.band_indices, subset);
  Patch out = patch;
  const std::size_t plane = patch.size() * patch.size();
  out.data = Tensor({pos.size(), patch.size(), patch.size()});
  for (std::size_t k = 0; k < pos.size(); ++k)
    std::copy_n(patch.data.data() + pos[k] * plane, plane, out.data.data() + k * plane);
  out.band_indices = subset;
  return out;
}

inline RasterImage select_channels(const RasterImage& image, const std::vector<int>& subset) {
  std::vector<int> available;
  for (const auto& b : image.bands) available.push_back(b.index);
  const auto pos = detail::channel_positions(available, subset);
  RasterImage out = image;
  out.bands.clear();
  out.data.assign(pos.size() * image.plane_size(), 0.0f);
  for (std::size_t k = 0; k < pos.size(); ++k) {
    out.bands.push_back(image.bands[pos[k]]);
    std::copy_n(image.band(pos[k]).begin(), image.plane_size(), out.band(k).begin());
  }
  return out;
}

inline DatasetSplit select_channels(const DatasetSplit& split, const std::vector<int>& subset) {
  DatasetSplit out;
  out.split = split.split;
  out.rng_seed = split.rng_seed;
  out.patches.reserve(split.size());
  for (const auto& p : split.patches) out.patches.push_back({select_channels(p.image, subset), p.mask});
  return out;
}

// "1-12", "5,3,2", "1-8,12" -> ordered band index list.
inline std::vector<int> parse_band_list(const std::string& text) {
  std::vector<int> out;
  std::size_t i = 0;
  auto read_int = [&]() {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t start = i;
    while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
    if (start == i) throw Error(ErrorCode::config, "expected band number in '" + text + "'");
    const int v = std::stoi(text.substr(start, i - start));
    while (i < text.size() && text[i] == ' ') ++i;
    return v;
  };
  while (i < text.size()) {
    const int a = read_int();
    if (i < text.size() && text[i] == '-') {
      ++i;
      const int b = read_int();
      require(a <= b, ErrorCode::config, "descending band range in '" + text + "'");
      for (int v = a; v <= b; ++v) out.push_back(v);
    } else {
      out.push_back(a);
    }
    if (i < text.size()) {
      require(text[i] == ',', ErrorCode::config, "unexpected character in band list '" + text + "'");
      ++i;
    }
  }
  require(!out.empty(), ErrorCode::config, "empty band list");
  return out;
}

// Hold out whole sources (flights) for validation; never split one source.
inline std::pair<DatasetSplit, DatasetSplit> split_by_source(const DatasetSplit& split, double holdout_fraction,
                                                             std::uint64_t seed) {
  std::vector<std::string> sources;
  for (const auto& p : split.patches)
    if (std::find(sources.begin(), sources.end(), p.image.source_id) == sources.end())
      sources.push_back(p.image.source_id);
  std::sort(sources.begin(), sources.end());
  const auto n_hold = static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(sources.size()) + 0.5));
  DatasetSplit train, val;
  train.split = val.split = split.split;
  train.rng_seed = val.rng_seed = split.rng_seed;
  if (n_hold == 0 || n_hold >= sources.size()) {
    train.patches = split.patches;
    return {train, val};
  }
  Rng rng(seed);
  shuffle(sources, rng);
  std::set<std::string> held(sources.begin(), sources.begin() + static_cast<std::ptrdiff_t>(n_hold));
  for (const auto& p : split.patches) (held.count(p.image.source_id) ? val : train).patches.push_back(p);
  return {train, val};
}

// Stack patch data into an N x C x S x S batch.
inline Tensor batch_images(const std::vector<PatchPair>& patches, std::span<const std::size_t> indices) {
  require(!indices.empty(), ErrorCode::invalid_argument, "empty batch");
  const auto& first = patches[indices[0]].image.data;
  const std::size_t per = first.size();
  Tensor out({indices.size(), first.dim(0), first.dim(1), first.dim(2)});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& t = patches[indices[k]].image.data;
    require(t.shape() == first.shape(), ErrorCode::shape_mismatch, "patches in a batch must share a shape");
    std::copy_n(t.data(), per, out.data() + k * per);
  }
  return out;
}

// ---- manifests ---------------------------------------------------------

struct ManifestEntry {
  std::filesystem::path raster;
  std::filesystem::path mask;
  SplitKind split = SplitKind::train;
};

// Parses `[{"raster":..., "mask":..., "split": "train"|"test"}, ...]`.
// Relative paths resolve against the manifest's directory.
inline std::vector<ManifestEntry> parse_manifest(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  require(j.is_array(), ErrorCode::config, "dataset manifest must be a JSON array");
  std::vector<ManifestEntry> out;
  for (const auto& e : j) {
    require(e.is_object(), ErrorCode::config, "manifest entry must be an object");
    for (auto it = e.begin(); it != e.end(); ++it)
      require(it.key() == "raster" || it.key() == "mask" || it.key() == "split", ErrorCode::config,
              "unknown manifest key '" + it.key() + "'");
    require(e.contains("raster") && e.contains("mask") && e.contains("split"), ErrorCode::config,
            "manifest entry needs raster, mask and split");
    ManifestEntry m;
    m.raster = e.at("raster").get<std::string>();
    m.mask = e.at("mask").get<std::string>();
    if (m.raster.is_relative()) m.raster = base / m.raster;
    if (m.mask.is_relative()) m.mask = base / m.mask;
    m.split = split_from_string(e.at("split").get<std::string>());
    out.push_back(std::move(m));
  }
  return out;
}

inline nlohmann::json manifest_json(const std::vector<ManifestEntry>& entries) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries)
    j.push_back({{"raster", e.raster.string()}, {"mask", e.mask.string()}, {"split", to_string(e.split)}});
  return j;
}

// Single-patch raster so image-level operations (rules, I/O) apply to patches.
inline RasterImage patch_to_raster(const Patch& p) {
  const auto profile = ams_band_profile();
  std::vector<BandSpec> bands;
  for (int idx : p.band_indices) {
    require(idx >= 1 && idx <= 12, ErrorCode::metadata, "patch band index out of range");
    bands.push_back(profile[static_cast<std::size_t>(idx - 1)]);
  }
  RasterImage img = make_raster(p.size(), p.size(), std::move(bands), UnitsState::normalized);
  std::copy(p.data.values().begin(), p.data.values().end(), img.data.begin());
  return img;
}

// ---- patch sets on disk ------------------------------------------------
//
// Each split is one raster and one mask with the patches stacked vertically
// (N*S x S), plus an index.json carrying per-patch metadata.

inline void write_patch_set(const std::vector<DatasetSplit>& splits, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json index{{"format", "firescan-patches"}, {"version", 1}, {"splits", nlohmann::json::array()}};
  for (const auto& split : splits) {
    const std::string name = to_string(split.split);
    nlohmann::json entry{{"split", name}, {"rng_seed", split.rng_seed}, {"patches", nlohmann::json::array()}};
    if (!split.patches.empty()) {
      const auto& first = split.patches.front().image;
      const std::size_t s = first.size(), n = split.patches.size();
      RasterImage stack = patch_to_raster(first);
      stack.height = n * s;
      stack.data.assign(first.channels() * n * s * s, 0.0f);
      MaskImage mstack = make_mask(n * s, s);
      for (std::size_t k = 0; k < n; ++k) {
        const auto& pp = split.patches[k];
        require(pp.image.band_indices == first.band_indices && pp.image.size() == s, ErrorCode::shape_mismatch,
                "patches in a split must share bands and size");
        for (std::size_t c = 0; c < first.channels(); ++c)
          std::copy_n(pp.image.data.data() + c * s * s, s * s, stack.data.data() + (c * n + k) * s * s);
        std::copy(pp.mask.data.begin(), pp.mask.data.end(), mstack.data.begin() + static_cast<std::ptrdiff_t>(k * s * s));
        entry["patches"].push_back({{"source", pp.image.source_id},
                                    {"row_off", pp.image.row_off},
                                    {"col_off", pp.image.col_off},
                                    {"fire_fraction", pp.image.fire_fraction},
                                    {"label", to_string(pp.image.label)}});
      }
      write_raster(stack, dir / (name + ".msr"));
      write_mask(mstack, dir / (name + ".mask"));
      entry["raster"] = name + ".msr";
      entry["mask"] = name + ".mask";
      entry["patch_size"] = s;
    }
    index["splits"].push_back(std::move(entry));
  }
  const std::string text = index.dump(2);
  detail::write_file(dir / "index.json", {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

// Returns the splits in index order. `path` is the directory or its index.json.
inline std::vector<DatasetSplit> read_patch_set(const std::filesystem::path& path) {
  const auto dir = std::filesystem::is_directory(path) ? path : path.parent_path();
  const auto index_path = dir / "index.json";
  require(std::filesystem::exists(index_path), ErrorCode::io, "patch set index not found: " + index_path.string());
  const auto bytes = detail::read_file(index_path);
  std::vector<DatasetSplit> out;
  try {
    const auto index = nlohmann::json::parse(bytes.begin(), bytes.end());
    require(index.value("format", "") == "firescan-patches", ErrorCode::data, "not a patch set index");
    for (const auto& entry : index.at("splits")) {
      DatasetSplit split;
      split.split = split_from_string(entry.at("split").get<std::string>());
      split.rng_seed = entry.at("rng_seed").get<std::uint64_t>();
      const auto& metas = entry.at("patches");
      if (!metas.empty()) {
        const RasterImage stack = read_raster(dir / entry.at("raster").get<std::string>());
        const MaskImage mstack = read_mask(dir / entry.at("mask").get<std::string>());
        const std::size_t s = entry.at("patch_size").get<std::size_t>(), n = metas.size();
        require(stack.width == s && stack.height == n * s && mstack.height == n * s && mstack.width == s,
                ErrorCode::data, "patch set dimensions disagree with its index");
        require(stack.units_state == UnitsState::normalized, ErrorCode::data, "patch set raster is not normalized");
        const std::size_t channels = stack.band_count();
        for (std::size_t k = 0; k < n; ++k) {
          PatchPair pp;
          pp.image.data = Tensor({channels, s, s});
          for (const auto& b : stack.bands) pp.image.band_indices.push_back(b.index);
          for (std::size_t c = 0; c < channels; ++c)
            std::copy_n(stack.data.data() + (c * n + k) * s * s, s * s, pp.image.data.data() + c * s * s);
          pp.mask.size = s;
          pp.mask.data.assign(mstack.data.begin() + static_cast<std::ptrdiff_t>(k * s * s),
                              mstack.data.begin() + static_cast<std::ptrdiff_t>((k + 1) * s * s));
          const auto& m = metas[k];
          pp.image.source_id = pp.mask.source_id = m.at("source").get<std::string>();
          pp.image.row_off = pp.mask.row_off = m.at("row_off").get<std::size_t>();
          pp.image.col_off = pp.mask.col_off = m.at("col_off").get<std::size_t>();
          pp.image.fire_fraction = m.at("fire_fraction").get<double>();
          pp.image.label = m.at("label").get<std::string>() == "positive" ? PatchLabel::positive : PatchLabel::negative;
          split.patches.push_back(std::move(pp));
        }
      }
      out.push_back(std::move(split));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::data, std::string("malformed patch set index: ") + e.what());
  }
  return out;
}

// Concatenation of every split of the given kind.
inline DatasetSplit find_split(const std::vector<DatasetSplit>& splits, SplitKind kind) {
  DatasetSplit out;
  out.split = kind;
  for (const auto& s : splits)
    if (s.split == kind) {
      out.rng_seed = s.rng_seed;
      out.patches.insert(out.patches.end(), s.patches.begin(), s.patches.end());
    }
  return out;
}

}  // namespace firescan
