#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "firescan/error.hpp"
#include "firescan/raster_io.hpp"

namespace firescan {

struct PreprocessConfig {
  double target_gsd_m = 10.0;
  double thermal_clip_lo_k = 250.0;
  double thermal_clip_hi_k = 500.0;
};

inline void validate(const PreprocessConfig& cfg) {
  require(cfg.target_gsd_m > 0 && std::isfinite(cfg.target_gsd_m), ErrorCode::config, "target_gsd_m must be > 0");
  require(cfg.thermal_clip_lo_k < cfg.thermal_clip_hi_k, ErrorCode::config,
          "thermal_clip_lo_k must be < thermal_clip_hi_k");
}

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

// Approximate TOA reflectance: radiance over band-averaged solar irradiance,
// clipped to [0,1]. No solar zenith correction.
inline std::vector<float> reflectance_normalize(std::span<const float> radiance, double irradiance) {
  require(irradiance > 0 && std::isfinite(irradiance), ErrorCode::config, "solar irradiance must be > 0");
  std::vector<float> out(radiance.size());
  for (std::size_t i = 0; i < radiance.size(); ++i) {
    require(std::isfinite(radiance[i]), ErrorCode::non_finite, "non-finite radiance");
    out[i] = clamp01(static_cast<double>(radiance[i]) / irradiance);
  }
  return out;
}

// Brightness temperature (K) clipped to [lo, hi] then mapped linearly onto [0,1].
inline std::vector<float> brightness_temperature_normalize(std::span<const float> kelvin,
                                                           const PreprocessConfig& cfg = {}) {
  validate(cfg);
  const double lo = cfg.thermal_clip_lo_k, hi = cfg.thermal_clip_hi_k;
  std::vector<float> out(kelvin.size());
  for (std::size_t i = 0; i < kelvin.size(); ++i) {
    require(std::isfinite(kelvin[i]), ErrorCode::non_finite, "non-finite brightness temperature");
    out[i] = clamp01((std::clamp(static_cast<double>(kelvin[i]), lo, hi) - lo) / (hi - lo));
  }
  return out;
}

namespace detail {

// Round half up, the rule used for every resampled dimension.
inline std::size_t resampled_dim(std::size_t dim, double gsd_m, double target_gsd_m) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(dim) * gsd_m / target_gsd_m + 0.5));
}

// Pixel-center mapping from an output coordinate to input coordinate.
inline double source_coord(std::size_t dst, double scale) { return (static_cast<double>(dst) + 0.5) * scale - 0.5; }

}  // namespace detail

// Bilinear resize of one band plane.
inline std::vector<float> resize_bilinear(std::span<const float> src, std::size_t in_h, std::size_t in_w,
                                          std::size_t out_h, std::size_t out_w) {
  std::vector<float> out(out_h * out_w);
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (std::size_t r = 0; r < out_h; ++r) {
    const double y = std::clamp(detail::source_coord(r, sy), 0.0, static_cast<double>(in_h - 1));
    const auto y0 = static_cast<std::size_t>(y);
    const auto y1 = std::min(y0 + 1, in_h - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < out_w; ++c) {
      const double x = std::clamp(detail::source_coord(c, sx), 0.0, static_cast<double>(in_w - 1));
      const auto x0 = static_cast<std::size_t>(x);
      const auto x1 = std::min(x0 + 1, in_w - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = src[y0 * in_w + x0] * (1 - fx) + src[y0 * in_w + x1] * fx;
      const double bot = src[y1 * in_w + x0] * (1 - fx) + src[y1 * in_w + x1] * fx;
      out[r * out_w + c] = static_cast<float>(top * (1 - fy) + bot * fy);
    }
  }
  return out;
}

inline RasterImage resample_to_gsd(const RasterImage& img, const PreprocessConfig& cfg = {}) {
  validate(cfg);
  require(img.gsd_m > 0, ErrorCode::invalid_argument, "image gsd_m must be > 0");
  const auto out_h = detail::resampled_dim(img.height, img.gsd_m, cfg.target_gsd_m);
  const auto out_w = detail::resampled_dim(img.width, img.gsd_m, cfg.target_gsd_m);
  require(out_h > 0 && out_w > 0, ErrorCode::invalid_argument, "resampled image would have a zero dimension");
  RasterImage out = img;
  out.gsd_m = cfg.target_gsd_m;
  if (out_h == img.height && out_w == img.width) return out;
  out.height = out_h;
  out.width = out_w;
  out.data.assign(out_h * out_w * img.band_count(), 0.0f);
  for (std::size_t b = 0; b < img.band_count(); ++b) {
    const auto plane = resize_bilinear(img.band(b), img.height, img.width, out_h, out_w);
    std::copy(plane.begin(), plane.end(), out.band(b).begin());
  }
  return out;
}

// Nearest-neighbour resampling keeps the mask binary.
inline MaskImage resample_mask(const MaskImage& mask, double gsd_m, const PreprocessConfig& cfg = {}) {
  validate(cfg);
  const auto out_h = detail::resampled_dim(mask.height, gsd_m, cfg.target_gsd_m);
  const auto out_w = detail::resampled_dim(mask.width, gsd_m, cfg.target_gsd_m);
  require(out_h > 0 && out_w > 0, ErrorCode::invalid_argument, "resampled mask would have a zero dimension");
  if (out_h == mask.height && out_w == mask.width) return mask;
  MaskImage out = make_mask(out_h, out_w);
  const double sy = static_cast<double>(mask.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(mask.width) / static_cast<double>(out_w);
  for (std::size_t r = 0; r < out_h; ++r) {
    const auto y = std::min(static_cast<std::size_t>((static_cast<double>(r) + 0.5) * sy), mask.height - 1);
    for (std::size_t c = 0; c < out_w; ++c) {
      const auto x = std::min(static_cast<std::size_t>((static_cast<double>(c) + 0.5) * sx), mask.width - 1);
      out.at(r, c) = mask.at(y, x);
    }
  }
  return out;
}

// Reflective bands -> reflectance, thermal band -> scaled brightness
// temperature, then resample to the target GSD.
inline RasterImage preprocess_image(const RasterImage& img, const PreprocessConfig& cfg = {}) {
  validate(cfg);
  require(img.units_state != UnitsState::normalized, ErrorCode::state, "image is already normalized");
  validate(img);
  RasterImage out = img;
  for (std::size_t b = 0; b < img.band_count(); ++b) {
    const auto& spec = img.bands[b];
    const auto plane = spec.kind == BandKind::reflective
                           ? reflectance_normalize(img.band(b), *spec.solar_irradiance)
                           : brightness_temperature_normalize(img.band(b), cfg);
    std::copy(plane.begin(), plane.end(), out.band(b).begin());
  }
  out.units_state = UnitsState::normalized;
  out = resample_to_gsd(out, cfg);
  // Bilinear weights are convex, so values stay in [0,1]; clamp guards rounding.
  for (auto& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

}  // namespace firescan
