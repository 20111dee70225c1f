#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "firescan/random.hpp"
#include "firescan/raster_io.hpp"
#include "support/temp_dir.hpp"

using namespace firescan;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an exception";
  return ErrorCode::io;
}

RasterImage random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  RasterImage img = make_raster(h, w, ams_band_profile());
  Rng rng(seed);
  for (auto& v : img.data) v = static_cast<float>(uniform(rng, 0, 400));
  img.acquisition = "2023-08-14T21:05:00Z";
  return img;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

TEST(BandProfile, TwelveBandsOneThermal) {
  const auto bands = ams_band_profile();
  ASSERT_EQ(bands.size(), 12u);
  int thermal = 0;
  for (const auto& b : bands) {
    EXPECT_NO_THROW(validate(b));
    EXPECT_LT(b.wavelength_lo_um, b.wavelength_hi_um);
    thermal += b.kind == BandKind::thermal;
  }
  EXPECT_EQ(thermal, 1);
  EXPECT_EQ(bands[11].kind, BandKind::thermal);
  EXPECT_DOUBLE_EQ(bands[9].wavelength_lo_um, 2.08);
  EXPECT_DOUBLE_EQ(bands[9].wavelength_hi_um, 2.35);
}

TEST(Raster, RoundTripIsBitExact) {
  TempDir dir;
  const auto img = random_image(4, 4, 1);
  write_raster(img, dir / "a.msrf");
  const auto back = read_raster(dir / "a.msrf");
  EXPECT_EQ(back, img);
  EXPECT_EQ(std::memcmp(back.data.data(), img.data.data(), img.data.size() * 4), 0);
}

TEST(Raster, RoundTripNormalizedWithOddShape) {
  TempDir dir;
  auto img = make_raster(3, 7, {ams_band_profile()[1], ams_band_profile()[11]}, UnitsState::normalized, 2.5);
  Rng rng(2);
  for (auto& v : img.data) v = static_cast<float>(uniform01(rng));
  write_raster(img, dir / "b.msrf");
  EXPECT_EQ(read_raster(dir / "b.msrf"), img);
}

TEST(Raster, SinglePixelFileLayout) {
  TempDir dir;
  auto img = make_raster(1, 1, {ams_band_profile()[0]});
  img.data[0] = 0.5f;
  write_raster(img, dir / "one.msrf");
  const auto bytes = slurp(dir / "one.msrf");
  ASSERT_EQ(bytes.size(), 18u + 4u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MSRF");
  EXPECT_EQ(bytes[4], 1);  // version LE
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);  // height
  EXPECT_EQ(bytes[10], 1);  // width
  EXPECT_EQ(bytes[14], 1);  // bands
  EXPECT_EQ(bytes[16], 0);  // dtype f32
  // 0.5f = 0x3F000000 little-endian
  EXPECT_EQ(bytes[18], 0x00);
  EXPECT_EQ(bytes[19], 0x00);
  EXPECT_EQ(bytes[20], 0x00);
  EXPECT_EQ(bytes[21], 0x3F);
  EXPECT_TRUE(std::filesystem::exists(dir / "one.msrf.json"));
}

TEST(Raster, FullPatchPayloadSize) {
  const auto img = make_raster(256, 256, ams_band_profile());
  EXPECT_EQ(encode_raster_payload(img).size() - 18, 3145728u);
}

TEST(Raster, ZeroBandImageRejected) {
  TempDir dir;
  const auto img = make_raster(2, 2, {});
  EXPECT_EQ(code_of([&] { write_raster(img, dir / "z.msrf"); }), ErrorCode::metadata);
}

TEST(Raster, LengthMismatchDetected) {
  TempDir dir;
  write_raster(random_image(4, 4, 3), dir / "c.msrf");
  auto bytes = slurp(dir / "c.msrf");
  bytes.resize(bytes.size() - 4);
  dump(dir / "c.msrf", bytes);
  EXPECT_EQ(code_of([&] { read_raster(dir / "c.msrf"); }), ErrorCode::length_mismatch);
  bytes.insert(bytes.end(), 12, 0);
  dump(dir / "c.msrf", bytes);
  EXPECT_EQ(code_of([&] { read_raster(dir / "c.msrf"); }), ErrorCode::length_mismatch);
}

TEST(Raster, BadMagicAndVersion) {
  TempDir dir;
  write_raster(random_image(2, 2, 4), dir / "d.msrf");
  auto bytes = slurp(dir / "d.msrf");
  auto bad = bytes;
  bad[0] = 'X';
  dump(dir / "d.msrf", bad);
  EXPECT_EQ(code_of([&] { read_raster(dir / "d.msrf"); }), ErrorCode::bad_magic);
  bad = bytes;
  bad[4] = 2;
  dump(dir / "d.msrf", bad);
  EXPECT_EQ(code_of([&] { read_raster(dir / "d.msrf"); }), ErrorCode::bad_version);
  dump(dir / "d.msrf", {bytes.begin(), bytes.begin() + 10});
  EXPECT_EQ(code_of([&] { read_raster(dir / "d.msrf"); }), ErrorCode::truncated);
}

TEST(Raster, NonFiniteRejected) {
  TempDir dir;
  write_raster(random_image(2, 2, 5), dir / "e.msrf");
  auto bytes = slurp(dir / "e.msrf");
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(&bytes[18 + 8], &nan, 4);
  dump(dir / "e.msrf", bytes);
  EXPECT_EQ(code_of([&] { read_raster(dir / "e.msrf"); }), ErrorCode::non_finite);
}

TEST(Raster, SidecarProblemsAreMetadataErrors) {
  TempDir dir;
  const auto img = random_image(2, 2, 6);
  write_raster(img, dir / "f.msrf");
  auto side = nlohmann::json::parse(slurp(dir / "f.msrf.json"));
  auto write_side = [&](const nlohmann::json& j) {
    std::ofstream(dir / "f.msrf.json") << j.dump();
  };
  auto broken = side;
  broken["bands"][3].erase("solar_irradiance");
  write_side(broken);
  EXPECT_EQ(code_of([&] { read_raster(dir / "f.msrf"); }), ErrorCode::metadata);

  broken = side;
  broken.erase("gsd_m");
  write_side(broken);
  EXPECT_EQ(code_of([&] { read_raster(dir / "f.msrf"); }), ErrorCode::metadata);

  broken = side;
  broken["bands"][0]["wavelength_hi_um"] = 0.1;
  write_side(broken);
  EXPECT_EQ(code_of([&] { read_raster(dir / "f.msrf"); }), ErrorCode::metadata);

  broken = side;
  broken["bands"].erase(broken["bands"].begin());
  write_side(broken);
  EXPECT_EQ(code_of([&] { read_raster(dir / "f.msrf"); }), ErrorCode::length_mismatch);

  std::filesystem::remove(dir / "f.msrf.json");
  EXPECT_EQ(code_of([&] { read_raster(dir / "f.msrf"); }), ErrorCode::metadata);
  EXPECT_EQ(code_of([&] { read_raster(dir / "missing.msrf"); }), ErrorCode::io);
}

TEST(Raster, NormalizedOutOfRangeRejected) {
  TempDir dir;
  auto img = random_image(2, 2, 7);
  write_raster(img, dir / "g.msrf");
  auto side = nlohmann::json::parse(slurp(dir / "g.msrf.json"));
  side["units_state"] = "normalized";
  std::ofstream(dir / "g.msrf.json") << side.dump();
  EXPECT_EQ(code_of([&] { read_raster(dir / "g.msrf"); }), ErrorCode::metadata);
}

TEST(Mask, RoundTrips) {
  TempDir dir;
  const auto zeros = make_mask(256, 256);
  write_mask(zeros, dir / "z.mask");
  EXPECT_EQ(read_mask(dir / "z.mask"), zeros);
  auto checker = make_mask(9, 13);
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 13; ++c) checker.at(r, c) = static_cast<std::uint8_t>((r + c) % 2);
  write_mask(checker, dir / "c.mask");
  EXPECT_EQ(read_mask(dir / "c.mask"), checker);
}

TEST(Mask, NonBinaryByteRejected) {
  TempDir dir;
  write_mask(make_mask(4, 4), dir / "m.mask");
  auto bytes = slurp(dir / "m.mask");
  bytes[18 + 5] = 2;
  dump(dir / "m.mask", bytes);
  EXPECT_EQ(code_of([&] { read_mask(dir / "m.mask"); }), ErrorCode::mask_value);
  auto bad = make_mask(2, 2);
  bad.data[1] = 7;
  EXPECT_EQ(code_of([&] { write_mask(bad, dir / "bad.mask"); }), ErrorCode::mask_value);
}

TEST(Mask, RasterContainerIsNotAMask) {
  TempDir dir;
  write_raster(random_image(2, 2, 8), dir / "r.msrf");
  EXPECT_EQ(code_of([&] { read_mask(dir / "r.msrf"); }), ErrorCode::metadata);
}

TEST(Checkpoint, RoundTripAndErrors) {
  TempDir dir;
  NamedTensors named{{"w", Tensor({3, 3})}};
  save_checkpoint(named, dir / "a.ck");
  const auto back = load_checkpoint(dir / "a.ck");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].first, "w");
  EXPECT_EQ(back[0].second, named[0].second);

  Rng rng(9);
  NamedTensors many{{"conv.w", Tensor({4, 2, 3, 3})}, {"bias", Tensor({4})}, {"scalar", Tensor(Shape{})}};
  for (auto& [n, t] : many)
    for (auto& v : t.values()) v = static_cast<float>(normal01(rng));
  save_checkpoint(many, dir / "b.ck");
  const auto b2 = load_checkpoint(dir / "b.ck");
  ASSERT_EQ(b2.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(b2[i].first, many[i].first);
    EXPECT_EQ(b2[i].second, many[i].second);
  }
  EXPECT_NE(find_tensor(b2, "bias"), nullptr);
  EXPECT_EQ(find_tensor(b2, "nope"), nullptr);

  NamedTensors dup{{"x", Tensor({1})}, {"x", Tensor({2})}};
  EXPECT_EQ(code_of([&] { save_checkpoint(dup, dir / "c.ck"); }), ErrorCode::duplicate_name);

  auto bytes = slurp(dir / "b.ck");
  bytes.pop_back();
  dump(dir / "t.ck", bytes);
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "t.ck"); }), ErrorCode::truncated);

  bytes = slurp(dir / "b.ck");
  bytes[4] = 9;
  dump(dir / "v.ck", bytes);
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "v.ck"); }), ErrorCode::bad_version);
}

TEST(Checkpoint, TruncationAtEveryLengthFails) {
  NamedTensors named{{"a", Tensor({2, 2}, 1.0f)}, {"b", Tensor({3}, 2.0f)}};
  const auto bytes = encode_checkpoint(named);
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    EXPECT_THROW(decode_checkpoint(std::span(bytes.data(), n)), Error) << n;
  }
}

}  // namespace
