#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "firescan_app.hpp"
#include "support/temp_dir.hpp"

using namespace firescan;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

void write_config(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

// Small synthetic run: 4 scenes of 64 x 64 cut into 32 px patches.
nlohmann::json small_config(const fs::path& out) {
  return {{"out", out.string()},
          {"dataset", {{"patch_size", 32}}},
          {"synthetic",
           {{"scenes", 4}, {"height", 64}, {"width", 64}, {"n_fires", 3}, {"fire_radius_min", 2}, {"fire_radius_max", 5}}},
          {"classifier", {{"epochs", 2}}},
          {"segmenter", {{"epochs", 2}}},
          {"bench", {{"count", 2}, {"warmup", 1}}}};
}

TEST(Cli, HelpMatchesGolden) {
  const fs::path golden = fs::path(FIRESCAN_GOLDEN_DIR) / "help.txt";
  const std::string text = cli::help_text();
  if (std::getenv("FIRESCAN_UPDATE_GOLDEN")) std::ofstream(golden, std::ios::binary) << text;
  EXPECT_EQ(text, slurp(golden));
}

TEST(Cli, HelpEnumeratesEveryFlag) {
  const std::string text = cli::help_text();
  for (const char* flag :
       {"--config", "--seed", "--out", "--channels", "--threshold", "--rate", "--quiet", "--synthetic", "--manifest",
        "--patch-size", "--patches", "--network", "--epochs", "--classifier-ckpt", "--segmenter-ckpt", "--rule",
        "--exclude-suppressed", "--image", "--mask", "--queue-depth", "--no-gate", "--single-thread", "--subsets",
        "--seeds", "--networks", "--count", "--warmup"})
    EXPECT_NE(text.find(flag), std::string::npos) << flag;
  for (const char* sub : {"prepare", "train", "eval", "baseline", "simulate", "ablate", "bench"})
    EXPECT_NE(text.find(std::string("firescan ") + sub), std::string::npos) << sub;
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("Subcommands:"), std::string::npos);
}

TEST(Cli, UsageErrorsExitWithConfigCode) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"train", "--bogus"}).code, 2);
  EXPECT_EQ(run({"train", "--network", "neither"}).code, 2);
  TempDir dir;
  EXPECT_EQ(run({"bench", "--out", dir.path().string(), "--threshold", "1.5"}).code, 2);
  EXPECT_EQ(run({"bench", "--out", dir.path().string(), "--channels", "1,,2"}).code, 2);
  EXPECT_EQ(run({"simulate", "--out", dir.path().string(), "--rate", "0"}).code, 2);
  EXPECT_EQ(run({"prepare", "--config", (dir / "missing.json").string()}).code, 2);
}

TEST(Cli, ConfigRejectsUnknownKeys) {
  TempDir dir;
  write_config(dir / "top.json", {{"seed", 1}, {"colour", "red"}});
  auto r = run({"bench", "--config", (dir / "top.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("colour"), std::string::npos);
  write_config(dir / "nested.json", {{"classifier", {{"epochs", 3}, {"momentum", 0.9}}}});
  EXPECT_EQ(run({"bench", "--config", (dir / "nested.json").string()}).code, 2);
  write_config(dir / "type.json", {{"seed", "seven"}});
  EXPECT_EQ(run({"bench", "--config", (dir / "type.json").string()}).code, 2);
  write_config(dir / "manifest.json", {{"dataset", {{"manifest", "nowhere.json"}}}});
  EXPECT_EQ(run({"prepare", "--config", (dir / "manifest.json").string()}).code, 2);
}

TEST(Cli, ConfigDocumentRoundTrips) {
  TempDir dir;
  auto j = small_config(dir / "out");
  j["rule"] = {{"expr", "b7 > 0.5"}, {"mapping", {{"7", 10}}}};
  j["classifier"]["target_metric"] = 0.9;
  const auto c = cli::parse_config(j);
  const auto again = cli::parse_config(cli::config_json(c));
  EXPECT_EQ(cli::config_json(again), cli::config_json(c));
  EXPECT_EQ(c.patch_size, 32u);
  EXPECT_EQ(*c.classifier.target_metric, 0.9);
  EXPECT_EQ(c.mapping.at(7), 10);
  EXPECT_EQ(cli::config_json(cli::RunConfig{})["threshold"], 0.5);
}

TEST(Cli, FlagsOverrideConfig) {
  TempDir dir;
  auto j = small_config(dir / "out");
  j["seed"] = 5;
  j["channels"] = "10";
  write_config(dir / "c.json", j);
  const auto r = run({"bench", "--config", (dir / "c.json").string(), "--seed", "7", "--quiet"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.out.empty());
  const auto echoed = read_json(dir / "out" / "config.bench.json");
  EXPECT_EQ(echoed["seed"], 7);
  EXPECT_EQ(echoed["channels"], "10");
  EXPECT_EQ(read_json(dir / "out" / "bench.json")["channels"], 1);
}

// 512 x 512 raw radiance image with a fire block in the top-left tile.
void write_raw_image(const fs::path& dir) {
  RasterImage img = make_raster(512, 512, ams_band_profile());
  MaskImage mask = make_mask(512, 512);
  for (std::size_t b = 0; b < 12; ++b) {
    const bool thermal = img.bands[b].kind == BandKind::thermal;
    for (auto& v : img.band(b)) v = thermal ? 300.0f : 0.2f * static_cast<float>(*img.bands[b].solar_irradiance);
  }
  for (std::size_t r = 10; r < 40; ++r)
    for (std::size_t c = 10; c < 40; ++c) {
      mask.at(r, c) = 1;
      img.at(11, r, c) = 480.0f;
    }
  write_raster(img, dir / "flight.msr");
  write_mask(mask, dir / "flight.mask");
  std::ofstream(dir / "manifest.json") << R"([{"raster": "flight.msr", "mask": "flight.mask", "split": "train"}])";
}

TEST(Cli, PrepareManifestWritesGridPatches) {
  TempDir dir;
  write_raw_image(dir.path());
  const auto out = dir / "out";
  const auto r = run({"prepare", "--manifest", (dir / "manifest.json").string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto splits = read_patch_set(out / "patches");
  const auto train_split = find_split(splits, SplitKind::train);
  ASSERT_EQ(train_split.size(), 4u);
  EXPECT_EQ(train_split.patches[0].image.size(), 256u);
  EXPECT_EQ(train_split.patches[0].image.source_id, "flight");

  // Recount positives from the stored masks.
  std::size_t positives = 0;
  for (const auto& pp : train_split.patches) {
    std::size_t fire = 0;
    for (auto v : pp.mask.data) fire += v;
    positives += static_cast<double>(fire) / static_cast<double>(pp.mask.data.size()) > 0.005;
  }
  const auto summary = read_json(out / "prepare_summary.json");
  EXPECT_EQ(summary["positives"], positives);
  EXPECT_EQ(positives, 1u);
  EXPECT_DOUBLE_EQ(summary["positive_fraction"].get<double>(), static_cast<double>(positives) / 4.0);
  // Normalized on the way in.
  for (auto v : train_split.patches[0].image.data.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Cli, PrepareEmptyManifestFails) {
  TempDir dir;
  std::ofstream(dir / "empty.json") << "[]";
  EXPECT_EQ(run({"prepare", "--manifest", (dir / "empty.json").string(), "--out", (dir / "o").string()}).code, 3);
  EXPECT_EQ(run({"prepare", "--out", (dir / "o").string()}).code, 2);
}

TEST(Cli, EvalWithMissingCheckpointExitsData) {
  TempDir dir;
  const auto r = run({"eval", "--out", dir.path().string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_FALSE(r.err.empty());
  EXPECT_EQ(run({"train", "--out", dir.path().string()}).code, 3);  // no patches yet
}

TEST(Cli, EndToEndSyntheticRun) {
  TempDir dir;
  const auto out = dir / "out";
  write_config(dir / "c.json", small_config(out));
  const std::string cfg = (dir / "c.json").string();

  auto r = run({"prepare", "--config", cfg, "--synthetic"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "scenes" / "manifest.json"));
  const auto summary = read_json(out / "prepare_summary.json");
  EXPECT_EQ(summary["patches"], 16);
  EXPECT_EQ(summary["splits"]["test"]["patches"], 4);

  r = run({"train", "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "classifier.ckpt"));
  EXPECT_TRUE(fs::exists(out / "segmenter.ckpt"));
  EXPECT_EQ(slurp(out / "classifier_curve.csv").substr(0, 18), "epoch,loss,acc,iou");
  const std::string first_ckpt = slurp(out / "classifier.ckpt");
  ASSERT_EQ(run({"train", "--config", cfg, "--network", "classifier"}).code, 0);
  EXPECT_EQ(slurp(out / "classifier.ckpt"), first_ckpt);

  r = run({"eval", "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto eval = read_json(out / "eval.json");
  ASSERT_EQ(eval.size(), 3u);
  EXPECT_EQ(eval[0]["patches"], 4);

  r = run({"baseline", "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_json(out / "baseline.json").size(), 4u);
  EXPECT_EQ(run({"baseline", "--config", cfg, "--rule", "b7 >"}).code, 2);

  r = run({"simulate", "--config", cfg, "--rate", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = read_json(out / "simulate" / "stitch_report.json");
  EXPECT_EQ(rep["decisions"].size(), 4u);
  EXPECT_TRUE(rep["contract_held"].get<bool>());
  EXPECT_EQ(read_mask(out / "simulate" / "stitched.mask").height, 64u);

  r = run({"ablate", "--config", cfg, "--seeds", "1", "--subsets", "5,3,2;1-12"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(out / "ablation_classifier.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);  // header + 2 rows
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "channels,accuracy,precision,recall");
  EXPECT_EQ(run({"ablate", "--config", cfg, "--subsets", "5,3,13"}).code, 2);

  r = run({"bench", "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_json(out / "bench.json")["patch_size"], 32);
}

}  // namespace
