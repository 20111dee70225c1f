#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "firescan/dataset.hpp"
#include "firescan/error.hpp"
#include "firescan/preprocess.hpp"
#include "firescan/random.hpp"
#include "firescan/raster_io.hpp"

namespace firescan {

// Synthetic 12-band scene: textured background, elliptical fires that raise
// bands 9-12, and smoke that occludes the fire glow in the visual bands 1-8.
struct SceneSpec {
  std::size_t height = 512;
  std::size_t width = 512;
  std::size_t n_fires = 8;
  // When set, fires are added until the mask reaches this fraction.
  std::optional<double> fire_fraction;
  double fire_radius_min = 4.0;  // pixels, ellipse semi-axes
  double fire_radius_max = 14.0;
  // Fire reflectance range for bands 9-11 (normalized units).
  double fire_swir_min = 0.6;
  double fire_swir_max = 0.95;
  // Fire brightness temperature range for band 12, kelvin.
  double fire_temp_min_k = 420.0;
  double fire_temp_max_k = 600.0;
  // 0 leaves the fire glow visible in bands 5-8; 1 hides it completely.
  double smoke_opacity = 1.0;
  std::size_t smoke_plumes = 3;
  std::uint64_t texture_seed = 0;
  PreprocessConfig thermal;  // clip range used to normalize band 12
};

inline void validate(const SceneSpec& s) {
  require(s.height > 0 && s.width > 0, ErrorCode::config, "scene dimensions must be positive");
  require(s.fire_radius_min > 0 && s.fire_radius_min <= s.fire_radius_max, ErrorCode::config,
          "fire radius range must satisfy 0 < min <= max");
  require(2.0 * s.fire_radius_max + 1.0 <= static_cast<double>(std::min(s.height, s.width)),
          ErrorCode::invalid_argument, "fire larger than image");
  require(s.fire_swir_min > 0.3 && s.fire_swir_min <= s.fire_swir_max && s.fire_swir_max <= 1.0, ErrorCode::config,
          "fire SWIR range must lie in (0.3, 1]");
  require(s.fire_temp_min_k >= 400.0 && s.fire_temp_min_k <= s.fire_temp_max_k, ErrorCode::config,
          "fire temperature range must start at or above 400 K");
  require(s.smoke_opacity >= 0.0 && s.smoke_opacity <= 1.0, ErrorCode::config, "smoke opacity must be in [0,1]");
  if (s.fire_fraction)
    require(*s.fire_fraction >= 0.0 && *s.fire_fraction < 0.5, ErrorCode::config, "fire fraction must be in [0,0.5)");
}

struct SynthScene {
  RasterImage image;  // normalized
  MaskImage mask;
};

// Largest background value in band 10; fire pixels start above fire_swir_min.
inline constexpr double kSynthBackgroundSwirMax = 0.3;

namespace detail {

struct Ellipse {
  double cy, cx, ry, rx, angle;
  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / rx, v = (-dx * s + dy * c) / ry;
    return u * u + v * v <= 1.0;
  }
  // Squared normalized radius (0 at center, 1 on the boundary).
  double radius2(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / rx, v = (-dx * s + dy * c) / ry;
    return u * u + v * v;
  }
};

// Short-wavelength cosine texture in [-1, 1]; its period is a few pixels so
// that averages over a fire-sized region are close to zero.
inline std::vector<float> texture(std::size_t h, std::size_t w, Rng& rng) {
  constexpr int kWaves = 4;
  double fy[kWaves], fx[kWaves], ph[kWaves];
  for (int k = 0; k < kWaves; ++k) {
    const double period = uniform(rng, 3.0, 9.0), theta = uniform(rng, 0.0, 6.283185307179586);
    fy[k] = std::sin(theta) * 6.283185307179586 / period;
    fx[k] = std::cos(theta) * 6.283185307179586 / period;
    ph[k] = uniform(rng, 0.0, 6.283185307179586);
  }
  // cos(a + b) = cos a cos b - sin a sin b, with a per row and b per column.
  std::vector<double> rc(kWaves * h), rs(kWaves * h), cc(kWaves * w), cs(kWaves * w);
  for (int k = 0; k < kWaves; ++k) {
    for (std::size_t r = 0; r < h; ++r) {
      rc[k * h + r] = std::cos(fy[k] * static_cast<double>(r) + ph[k]);
      rs[k * h + r] = std::sin(fy[k] * static_cast<double>(r) + ph[k]);
    }
    for (std::size_t c = 0; c < w; ++c) {
      cc[k * w + c] = std::cos(fx[k] * static_cast<double>(c));
      cs[k * w + c] = std::sin(fx[k] * static_cast<double>(c));
    }
  }
  std::vector<float> t(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      double v = 0;
      for (int k = 0; k < kWaves; ++k) v += rc[k * h + r] * cc[k * w + c] - rs[k * h + r] * cs[k * w + c];
      t[r * w + c] = static_cast<float>(0.5 * v / kWaves + 0.5 * uniform(rng, -1.0, 1.0));
    }
  return t;
}

inline Ellipse random_ellipse(const SceneSpec& s, Rng& rng) {
  Ellipse e;
  e.ry = uniform(rng, s.fire_radius_min, s.fire_radius_max);
  e.rx = uniform(rng, s.fire_radius_min, s.fire_radius_max);
  const double rmax = std::max(e.ry, e.rx);
  e.cy = uniform(rng, rmax, static_cast<double>(s.height) - rmax);
  e.cx = uniform(rng, rmax, static_cast<double>(s.width) - rmax);
  e.angle = uniform(rng, 0.0, 3.141592653589793);
  return e;
}

struct FireSignal {
  Ellipse shape;
  double swir;    // bands 9-11 peak
  double temp_k;  // band 12 peak
};

}  // namespace detail

// Deterministic in (spec, seed). The mask is 1 exactly where a fire ellipse
// covers the pixel, and those pixels (and only those) carry the fire signal.
inline SynthScene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  validate(spec);
  const std::size_t h = spec.height, w = spec.width, n = h * w;
  Rng fire_rng(mix_seed(seed, 11));
  Rng tex_rng(mix_seed(spec.texture_seed ^ seed, 12));

  // Fires and mask.
  MaskImage mask = make_mask(h, w);
  std::vector<detail::FireSignal> fires;
  std::vector<int> owner(n, -1);  // index of the last fire covering the pixel
  std::size_t covered = 0;
  auto add_fire = [&]() {
    detail::FireSignal f{detail::random_ellipse(spec, fire_rng), uniform(fire_rng, spec.fire_swir_min, spec.fire_swir_max),
                         uniform(fire_rng, spec.fire_temp_min_k, spec.fire_temp_max_k)};
    const auto& e = f.shape;
    const double rmax = std::max(e.ry, e.rx);
    const auto r0 = static_cast<std::size_t>(std::max(0.0, std::floor(e.cy - rmax)));
    const auto r1 = std::min(h, static_cast<std::size_t>(std::ceil(e.cy + rmax)) + 1);
    const auto c0 = static_cast<std::size_t>(std::max(0.0, std::floor(e.cx - rmax)));
    const auto c1 = std::min(w, static_cast<std::size_t>(std::ceil(e.cx + rmax)) + 1);
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c)
        if (e.contains(static_cast<double>(r), static_cast<double>(c))) {
          if (!mask.data[r * w + c]) ++covered;
          mask.data[r * w + c] = 1;
          owner[r * w + c] = static_cast<int>(fires.size());
        }
    fires.push_back(f);
  };
  if (spec.fire_fraction) {
    const double target = *spec.fire_fraction * static_cast<double>(n);
    // Each ellipse adds at most pi*rmax^2 pixels, which bounds the overshoot.
    for (std::size_t guard = 0; static_cast<double>(covered) < target && guard < 100000; ++guard) add_fire();
  } else {
    for (std::size_t i = 0; i < spec.n_fires; ++i) add_fire();
  }

  // Smoke plumes, positioned independently of the fires.
  std::vector<float> haze(n, 0.0f);
  for (std::size_t p = 0; p < spec.smoke_plumes; ++p) {
    const double cy = uniform(tex_rng, 0.0, static_cast<double>(h)), cx = uniform(tex_rng, 0.0, static_cast<double>(w));
    const double sy = uniform(tex_rng, 0.1, 0.3) * static_cast<double>(h), sx = uniform(tex_rng, 0.1, 0.3) * static_cast<double>(w);
    std::vector<double> gy(h), gx(w);
    for (std::size_t r = 0; r < h; ++r) gy[r] = std::exp(-0.5 * std::pow((static_cast<double>(r) - cy) / sy, 2));
    for (std::size_t c = 0; c < w; ++c) gx[c] = std::exp(-0.5 * std::pow((static_cast<double>(c) - cx) / sx, 2));
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        haze[r * w + c] = std::max(haze[r * w + c], static_cast<float>(gy[r] * gx[c]));
  }

  RasterImage img = make_raster(h, w, ams_band_profile(), UnitsState::normalized, 10.0);
  const double glow = 1.0 - spec.smoke_opacity;
  for (std::size_t b = 0; b < 12; ++b) {
    const auto tex = detail::texture(h, w, tex_rng);
    auto band = img.band(b);
    if (b < 8) {
      // Visual bands: background in [0.02, 0.3], hazed toward smoke gray.
      const double base = uniform(tex_rng, 0.08, 0.2), amp = 0.06, smoke = uniform(tex_rng, 0.15, 0.25);
      for (std::size_t i = 0; i < n; ++i) {
        double v = base + amp * tex[i];
        v += (smoke - v) * spec.smoke_opacity * haze[i];
        if (b >= 4 && owner[i] >= 0) v += glow * 0.4;
        band[i] = clamp01(std::clamp(v, 0.02, b >= 4 ? 1.0 : 0.3));
      }
    } else if (b < 11) {
      const double base = uniform(tex_rng, 0.1, 0.18), amp = 0.08;
      const double scale = b == 8 ? 0.85 : (b == 9 ? 1.0 : 0.95);
      for (std::size_t i = 0; i < n; ++i) {
        double v = std::clamp(base + amp * tex[i], 0.02, kSynthBackgroundSwirMax);
        if (owner[i] >= 0) {
          const auto& f = fires[static_cast<std::size_t>(owner[i])];
          const double r2 = f.shape.radius2(static_cast<double>(i / w), static_cast<double>(i % w));
          const double lo = spec.fire_swir_min * (b == 9 ? 1.0 : scale);
          v = std::max(lo, scale * f.swir * (1.0 - 0.15 * r2));
        }
        band[i] = clamp01(v);
      }
    } else {
      std::vector<float> kelvin(n);
      const double base = uniform(tex_rng, 290.0, 305.0);
      for (std::size_t i = 0; i < n; ++i) {
        double t = base + 10.0 * tex[i];
        if (owner[i] >= 0) {
          const auto& f = fires[static_cast<std::size_t>(owner[i])];
          const double r2 = f.shape.radius2(static_cast<double>(i / w), static_cast<double>(i % w));
          t = std::max(spec.fire_temp_min_k, f.temp_k * (1.0 - 0.1 * r2));
        }
        kelvin[i] = static_cast<float>(t);
      }
      const auto norm = brightness_temperature_normalize(kelvin, spec.thermal);
      std::copy(norm.begin(), norm.end(), band.begin());
    }
  }
  return {std::move(img), std::move(mask)};
}

inline double fire_fraction(const MaskImage& m) {
  if (m.data.empty()) return 0.0;
  std::size_t n = 0;
  for (auto v : m.data) n += v;
  return static_cast<double>(n) / static_cast<double>(m.data.size());
}

// A labelled patch set drawn from single-patch scenes. Positive patches get
// a fire fraction in [min_pos_fraction, max_pos_fraction]; negatives have no
// fire. Patches are spread over `sources` pseudo-flights so that
// source-level holdouts work.
struct PatchSetSpec {
  std::size_t count = 64;
  std::size_t size = 64;
  double positive_fraction = 0.5;
  double min_pos_fraction = 0.03;
  double max_pos_fraction = 0.12;
  std::size_t sources = 8;
  double smoke_opacity = 1.0;
  SplitKind split = SplitKind::train;
};

inline DatasetSplit generate_patch_set(const PatchSetSpec& ps, std::uint64_t seed) {
  require(ps.count > 0 && ps.size >= 16 && ps.sources > 0, ErrorCode::config, "invalid patch set spec");
  require(ps.positive_fraction >= 0 && ps.positive_fraction <= 1, ErrorCode::config,
          "positive_fraction must be in [0,1]");
  const auto n_pos = static_cast<std::size_t>(std::llround(ps.positive_fraction * static_cast<double>(ps.count)));
  std::vector<bool> positive(ps.count, false);
  std::fill(positive.begin(), positive.begin() + static_cast<std::ptrdiff_t>(n_pos), true);
  Rng rng(mix_seed(seed, 21));
  shuffle(positive, rng);

  DatasetSplit out;
  out.split = ps.split;
  out.rng_seed = seed;
  const LabelRule rule;
  for (std::size_t i = 0; i < ps.count; ++i) {
    SceneSpec s;
    s.height = s.width = ps.size;
    s.fire_radius_min = std::max(2.0, static_cast<double>(ps.size) / 32.0);
    s.fire_radius_max = std::max(s.fire_radius_min, static_cast<double>(ps.size) / 8.0);
    s.smoke_opacity = ps.smoke_opacity;
    s.smoke_plumes = 1;
    s.texture_seed = seed;
    if (positive[i]) {
      // Keep the realized fraction above the positive-label threshold.
      s.fire_fraction = std::max(uniform(rng, ps.min_pos_fraction, ps.max_pos_fraction), 2.0 * rule.min_fire_fraction);
    } else {
      s.n_fires = 0;
    }
    auto scene = generate_scene(s, mix_seed(seed, 100 + i));
    auto pair = extract_patch(scene.image, scene.mask, 0, 0, ps.size, "synth-" + std::to_string(i % ps.sources), rule);
    out.patches.push_back(std::move(pair));
  }
  return out;
}

}  // namespace firescan
