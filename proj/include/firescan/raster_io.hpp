#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "firescan/error.hpp"
#include "firescan/tensor.hpp"

namespace firescan {

enum class BandKind { reflective, thermal };
enum class UnitsState { raw_radiance, brightness_temperature_mixed, normalized };

inline std::string to_string(BandKind k) { return k == BandKind::reflective ? "reflective" : "thermal"; }

inline std::string to_string(UnitsState s) {
  switch (s) {
    case UnitsState::raw_radiance: return "raw_radiance";
    case UnitsState::brightness_temperature_mixed: return "brightness_temperature_mixed";
    case UnitsState::normalized: return "normalized";
  }
  return "?";
}

struct BandSpec {
  int index = 0;  // 1..12
  std::string label;
  double wavelength_lo_um = 0;
  double wavelength_hi_um = 0;
  BandKind kind = BandKind::reflective;
  std::optional<double> solar_irradiance;  // W/m^2/um, band averaged

  friend bool operator==(const BandSpec&, const BandSpec&) = default;
};

inline void validate(const BandSpec& b) {
  require(b.index >= 1 && b.index <= 12, ErrorCode::metadata, "band index out of range 1..12");
  require(b.wavelength_lo_um < b.wavelength_hi_um, ErrorCode::metadata,
          "band " + std::to_string(b.index) + ": wavelength_lo_um must be < wavelength_hi_um");
  if (b.kind == BandKind::reflective) {
    require(b.solar_irradiance.has_value(), ErrorCode::metadata,
            "band " + std::to_string(b.index) + ": reflective band requires solar_irradiance");
  }
  if (b.solar_irradiance) {
    require(*b.solar_irradiance > 0, ErrorCode::metadata,
            "band " + std::to_string(b.index) + ": solar_irradiance must be > 0");
  }
}

// Nominal 12-band AMS profile. Irradiance values are band averages of a
// standard exo-atmospheric solar spectrum; real flights should override them
// with the values shipped in the product metadata.
inline std::vector<BandSpec> ams_band_profile() {
  using K = BandKind;
  return {
      {1, "Blue-violet", 0.42, 0.45, K::reflective, 1750.0},
      {2, "Blue", 0.45, 0.52, K::reflective, 1950.0},
      {3, "Green", 0.52, 0.60, K::reflective, 1830.0},
      {4, "Yellow", 0.60, 0.62, K::reflective, 1720.0},
      {5, "Red", 0.63, 0.69, K::reflective, 1550.0},
      {6, "Red edge", 0.69, 0.75, K::reflective, 1410.0},
      {7, "NIR", 0.76, 0.90, K::reflective, 1120.0},
      {8, "NIR II", 0.91, 1.05, K::reflective, 880.0},
      {9, "SWIR II", 1.55, 1.75, K::reflective, 230.0},
      {10, "SWIR", 2.08, 2.35, K::reflective, 80.0},
      {11, "Infrared (IR)", 3.60, 3.79, K::reflective, 11.0},
      {12, "Thermal", 10.26, 11.26, K::thermal, std::nullopt},
  };
}

struct RasterImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<BandSpec> bands;
  std::vector<float> data;  // band-planar: [band][row][col]
  double gsd_m = 10.0;
  std::optional<std::string> acquisition;
  UnitsState units_state = UnitsState::raw_radiance;

  std::size_t band_count() const noexcept { return bands.size(); }
  std::size_t plane_size() const noexcept { return height * width; }

  std::span<float> band(std::size_t b) { return {data.data() + b * plane_size(), plane_size()}; }
  std::span<const float> band(std::size_t b) const { return {data.data() + b * plane_size(), plane_size()}; }

  float& at(std::size_t b, std::size_t r, std::size_t c) { return data[(b * height + r) * width + c]; }
  float at(std::size_t b, std::size_t r, std::size_t c) const { return data[(b * height + r) * width + c]; }

  // Position of the band with the given 1-based index, if present.
  std::optional<std::size_t> find_band(int index) const {
    for (std::size_t i = 0; i < bands.size(); ++i)
      if (bands[i].index == index) return i;
    return std::nullopt;
  }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

inline RasterImage make_raster(std::size_t height, std::size_t width, std::vector<BandSpec> bands,
                               UnitsState units = UnitsState::raw_radiance, double gsd_m = 10.0) {
  RasterImage img;
  img.height = height;
  img.width = width;
  img.data.assign(height * width * bands.size(), 0.0f);
  img.bands = std::move(bands);
  img.units_state = units;
  img.gsd_m = gsd_m;
  return img;
}

inline void validate(const RasterImage& img) {
  require(!img.bands.empty(), ErrorCode::metadata, "raster must have at least one band");
  require(img.height > 0 && img.width > 0, ErrorCode::metadata, "raster dimensions must be positive");
  require(img.data.size() == img.height * img.width * img.bands.size(), ErrorCode::length_mismatch,
          "raster data length does not equal height*width*bands");
  require(img.gsd_m > 0 && std::isfinite(img.gsd_m), ErrorCode::metadata, "gsd_m must be > 0");
  std::set<int> seen;
  for (const auto& b : img.bands) {
    validate(b);
    require(seen.insert(b.index).second, ErrorCode::metadata, "duplicate band index " + std::to_string(b.index));
  }
  for (float v : img.data) require(std::isfinite(v), ErrorCode::non_finite, "raster contains non-finite value");
  if (img.units_state == UnitsState::normalized) {
    for (float v : img.data)
      require(v >= 0.0f && v <= 1.0f, ErrorCode::metadata, "normalized raster value outside [0,1]");
  }
}

struct MaskImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;  // row-major, values in {0,1}

  std::uint8_t& at(std::size_t r, std::size_t c) { return data[r * width + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return data[r * width + c]; }

  friend bool operator==(const MaskImage&, const MaskImage&) = default;
};

inline MaskImage make_mask(std::size_t height, std::size_t width, std::uint8_t fill = 0) {
  return MaskImage{height, width, std::vector<std::uint8_t>(height * width, fill)};
}

inline void validate(const MaskImage& m) {
  require(m.data.size() == m.height * m.width, ErrorCode::length_mismatch, "mask data length mismatch");
  for (auto v : m.data) require(v <= 1, ErrorCode::mask_value, "mask value not in {0,1}");
}

namespace detail {

inline constexpr std::array<char, 4> kRasterMagic{'M', 'S', 'R', 'F'};
inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'S', 'C', 'K'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderSize = 18;

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }
  void reserve(std::size_t n) { bytes_.reserve(n); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return need(1), bytes_[pos_++]; }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorCode::truncated, "unexpected end of data");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

struct ContainerHeader {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint16_t band_count = 0;
  DType dtype = DType::f32;
};

inline void write_header(ByteWriter& w, const ContainerHeader& h) {
  w.raw(kRasterMagic.data(), 4);
  w.u16(kFormatVersion);
  w.u32(h.height);
  w.u32(h.width);
  w.u16(h.band_count);
  w.u8(static_cast<std::uint8_t>(h.dtype));
  w.u8(0);
}

inline ContainerHeader read_header(ByteReader& r) {
  if (r.remaining() < kHeaderSize) throw Error(ErrorCode::truncated, "file shorter than container header");
  auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), kRasterMagic.begin()))
    throw Error(ErrorCode::bad_magic, "not an MSRF container");
  const auto version = r.u16();
  if (version != kFormatVersion)
    throw Error(ErrorCode::bad_version, "unsupported container version " + std::to_string(version));
  ContainerHeader h;
  h.height = r.u32();
  h.width = r.u32();
  h.band_count = r.u16();
  const auto dtype = r.u8();
  if (dtype > 1) throw Error(ErrorCode::metadata, "unknown dtype " + std::to_string(dtype));
  h.dtype = static_cast<DType>(dtype);
  r.u8();  // reserved
  return h;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

}  // namespace detail

// ---- sidecar -----------------------------------------------------------

inline nlohmann::json band_to_json(const BandSpec& b) {
  nlohmann::json j{{"index", b.index},
                   {"label", b.label},
                   {"wavelength_lo_um", b.wavelength_lo_um},
                   {"wavelength_hi_um", b.wavelength_hi_um},
                   {"kind", to_string(b.kind)}};
  if (b.solar_irradiance) j["solar_irradiance"] = *b.solar_irradiance;
  return j;
}

inline BandSpec band_from_json(const nlohmann::json& j) {
  auto field = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) throw Error(ErrorCode::metadata, std::string("band entry missing field '") + key + "'");
    return j.at(key);
  };
  try {
    BandSpec b;
    b.index = field("index").get<int>();
    b.label = field("label").get<std::string>();
    b.wavelength_lo_um = field("wavelength_lo_um").get<double>();
    b.wavelength_hi_um = field("wavelength_hi_um").get<double>();
    const auto kind = field("kind").get<std::string>();
    if (kind == "reflective")
      b.kind = BandKind::reflective;
    else if (kind == "thermal")
      b.kind = BandKind::thermal;
    else
      throw Error(ErrorCode::metadata, "unknown band kind '" + kind + "'");
    if (j.contains("solar_irradiance") && !j.at("solar_irradiance").is_null())
      b.solar_irradiance = j.at("solar_irradiance").get<double>();
    validate(b);
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::metadata, std::string("malformed band entry: ") + e.what());
  }
}

inline UnitsState units_from_string(const std::string& s) {
  if (s == "raw_radiance") return UnitsState::raw_radiance;
  if (s == "brightness_temperature_mixed") return UnitsState::brightness_temperature_mixed;
  if (s == "normalized") return UnitsState::normalized;
  throw Error(ErrorCode::metadata, "unknown units_state '" + s + "'");
}

inline nlohmann::json sidecar_json(const RasterImage& img) {
  nlohmann::json bands = nlohmann::json::array();
  for (const auto& b : img.bands) bands.push_back(band_to_json(b));
  nlohmann::json j{{"bands", bands}, {"gsd_m", img.gsd_m}, {"units_state", to_string(img.units_state)}};
  if (img.acquisition) j["acquisition"] = *img.acquisition;
  return j;
}

// ---- raster ------------------------------------------------------------

inline std::vector<std::uint8_t> encode_raster_payload(const RasterImage& img) {
  validate(img);
  require(img.bands.size() <= UINT16_MAX, ErrorCode::metadata, "too many bands");
  detail::ByteWriter w;
  w.reserve(detail::kHeaderSize + img.data.size() * 4);
  detail::write_header(w, {static_cast<std::uint32_t>(img.height), static_cast<std::uint32_t>(img.width),
                           static_cast<std::uint16_t>(img.bands.size()), detail::DType::f32});
  for (float v : img.data) w.f32(v);
  return w.take();
}

// Decode container bytes plus a parsed sidecar into a validated image.
inline RasterImage decode_raster(std::span<const std::uint8_t> bytes, const nlohmann::json& sidecar) {
  detail::ByteReader r(bytes);
  const auto h = detail::read_header(r);
  require(h.dtype == detail::DType::f32, ErrorCode::metadata, "raster payload must be f32");
  const std::size_t n = std::size_t{h.height} * h.width * h.band_count;
  require(r.remaining() == n * 4, ErrorCode::length_mismatch,
          "payload has " + std::to_string(r.remaining()) + " bytes, expected " + std::to_string(n * 4));

  RasterImage img;
  img.height = h.height;
  img.width = h.width;
  try {
    if (!sidecar.contains("bands")) throw Error(ErrorCode::metadata, "sidecar missing 'bands'");
    if (!sidecar.contains("gsd_m")) throw Error(ErrorCode::metadata, "sidecar missing 'gsd_m'");
    if (!sidecar.contains("units_state")) throw Error(ErrorCode::metadata, "sidecar missing 'units_state'");
    for (const auto& b : sidecar.at("bands")) img.bands.push_back(band_from_json(b));
    img.gsd_m = sidecar.at("gsd_m").get<double>();
    img.units_state = units_from_string(sidecar.at("units_state").get<std::string>());
    if (sidecar.contains("acquisition") && !sidecar.at("acquisition").is_null())
      img.acquisition = sidecar.at("acquisition").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::metadata, std::string("malformed sidecar: ") + e.what());
  }
  require(img.bands.size() == h.band_count, ErrorCode::length_mismatch,
          "sidecar lists " + std::to_string(img.bands.size()) + " bands, header says " +
              std::to_string(h.band_count));
  img.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) img.data[i] = r.f32();
  validate(img);
  return img;
}

inline void write_raster(const RasterImage& img, const std::filesystem::path& path) {
  const auto bytes = encode_raster_payload(img);
  detail::write_file(path, bytes);
  const auto side = sidecar_json(img).dump(2);
  detail::write_file(detail::sidecar_path(path),
                     {reinterpret_cast<const std::uint8_t*>(side.data()), side.size()});
}

inline RasterImage read_raster(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const auto side_path = detail::sidecar_path(path);
  if (!std::filesystem::exists(side_path)) throw Error(ErrorCode::metadata, "missing sidecar " + side_path.string());
  const auto side_bytes = detail::read_file(side_path);
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(side_bytes.begin(), side_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::metadata, std::string("sidecar is not valid JSON: ") + e.what());
  }
  return decode_raster(bytes, side);
}

// ---- mask --------------------------------------------------------------

inline std::vector<std::uint8_t> encode_mask(const MaskImage& m, bool preview = false) {
  validate(m);
  require(m.height > 0 && m.width > 0, ErrorCode::metadata, "mask dimensions must be positive");
  detail::ByteWriter w;
  w.reserve(detail::kHeaderSize + m.data.size());
  detail::write_header(w, {static_cast<std::uint32_t>(m.height), static_cast<std::uint32_t>(m.width), 1,
                           detail::DType::u8});
  for (auto v : m.data) w.u8(preview ? static_cast<std::uint8_t>(v * 255) : v);
  return w.take();
}

inline MaskImage decode_mask(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto h = detail::read_header(r);
  require(h.dtype == detail::DType::u8 && h.band_count == 1, ErrorCode::metadata,
          "mask container must be single-band u8");
  const std::size_t n = std::size_t{h.height} * h.width;
  require(r.remaining() == n, ErrorCode::length_mismatch, "mask payload length mismatch");
  MaskImage m{h.height, h.width, {}};
  auto payload = r.raw(n);
  m.data.assign(payload.begin(), payload.end());
  validate(m);
  return m;
}

inline void write_mask(const MaskImage& m, const std::filesystem::path& path) {
  detail::write_file(path, encode_mask(m));
}

inline MaskImage read_mask(const std::filesystem::path& path) { return decode_mask(detail::read_file(path)); }

// 0/255 grayscale copy for viewers; not readable back as a mask.
inline void write_mask_preview(const MaskImage& m, const std::filesystem::path& path) {
  detail::write_file(path, encode_mask(m, true));
}

// ---- checkpoint --------------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline const Tensor* find_tensor(const NamedTensors& named, std::string_view name) {
  for (const auto& [n, t] : named)
    if (n == name) return &t;
  return nullptr;
}

inline std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& named) {
  std::set<std::string_view> names;
  detail::ByteWriter w;
  w.raw(detail::kCheckpointMagic.data(), 4);
  w.u16(detail::kFormatVersion);
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    require(names.insert(name).second, ErrorCode::duplicate_name, "duplicate tensor name '" + name + "'");
    require(name.size() <= UINT16_MAX, ErrorCode::invalid_argument, "tensor name too long");
    require(t.rank() <= UINT8_MAX, ErrorCode::invalid_argument, "tensor rank too large");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values()) w.f32(v);
  }
  return w.take();
}

inline NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), detail::kCheckpointMagic.begin()))
    throw Error(ErrorCode::bad_magic, "not an FSCK checkpoint");
  const auto version = r.u16();
  if (version != detail::kFormatVersion)
    throw Error(ErrorCode::bad_version, "unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u32();
  NamedTensors out;
  std::set<std::string> names;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = r.u16();
    auto name_bytes = r.raw(len);
    std::string name(name_bytes.begin(), name_bytes.end());
    require(names.insert(name).second, ErrorCode::duplicate_name, "duplicate tensor name '" + name + "'");
    const auto rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = shape_size(shape);
    if (r.remaining() < n * 4) throw Error(ErrorCode::truncated, "tensor '" + name + "' payload truncated");
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32();
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  require(r.remaining() == 0, ErrorCode::length_mismatch, "trailing bytes after checkpoint entries");
  return out;
}

inline void save_checkpoint(const NamedTensors& named, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(named));
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace firescan
