#include <cmath>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cli.hpp"
#include "qdwi/evaluation.hpp"
#include "qdwi/phantom.hpp"
#include "qdwi/training.hpp"
#include "tiny.hpp"

using namespace qdwi;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result qdwi_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// One simulated dataset and a briefly trained checkpoint shared by the suite.
class CliPipeline : public ::testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "qdwi_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    PhantomSpec spec;
    spec.dims = {16, 16, 16};
    spec.train_subjects = 2;
    spec.val_subjects = 0;
    spec.test_subjects = 1;
    write_file(root / "spec.json", phantom_spec_to_json(spec));
    write_gradient_table(make_multishell_table({1000, 2000}, 6), root / "full.bvec", root / "full.bval");
    auto config = testkit::tiny_train_config();
    config.steps = 4;
    write_file(root / "train.json", train_config_to_json(config));

    auto sim = qdwi_run({"simulate", "--spec", (root / "spec.json").string(), "--table",
                         (root / "full.bvec").string() + "," + (root / "full.bval").string(), "--seed", "5", "--out",
                         (root / "data").string(), "--downsample-rate", "0.5"});
    ASSERT_EQ(sim.code, 0) << sim.err;
    auto tr = qdwi_run({"train", "--config", (root / "train.json").string(), "--data", (root / "data").string(),
                        "--out", (root / "model.qckpt").string(), "--log-every", "0"});
    ASSERT_EQ(tr.code, 0) << tr.err;
  }

  static fs::path test_subject() { return root / "data" / "test" / "subject_2"; }
  static std::string table(const std::string& prefix) {
    return (root / "data" / (prefix + ".bvec")).string() + "," + (root / "data" / (prefix + ".bval")).string();
  }
};

fs::path CliPipeline::root;

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(qdwi_run({}).code, 2);
  EXPECT_EQ(qdwi_run({"explode"}).code, 2);
  EXPECT_EQ(qdwi_run({"evaluate", "--pred", "a"}).code, 2);
  EXPECT_EQ(qdwi_run({"evaluate", "--pred", "a", "--ref", "b", "--mask", "m", "--json", "j", "--bogus"}).code, 2);
  EXPECT_EQ(qdwi_run({"evaluate", "--pred", "a", "--ref", "b", "--mask", "m", "--json", "j", "--dti"}).code, 2);
  EXPECT_EQ(qdwi_run({"animate", "--ckpt", "c", "--structural", "s", "--from-dir", "1,0", "--to-dir", "0,1,0",
                      "--bval", "1000", "--frames", "3", "--out", "o"})
                .code,
            2);
  EXPECT_EQ(qdwi_run({"--help"}).code, 0);
}

TEST(Cli, MissingFilesAreRuntimeErrors) {
  const auto r = qdwi_run({"evaluate", "--pred", "/nonexistent/a.qvol", "--ref", "/nonexistent/a.qvol", "--mask",
                           "/nonexistent/m.qvol", "--json", "/tmp/qdwi_unused.json"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("/nonexistent/a.qvol"), std::string::npos);
  EXPECT_FALSE(fs::exists("/tmp/qdwi_unused.json"));
}

TEST_F(CliPipeline, SimulateLayout) {
  for (const char* f : {"table.bvec", "table.bval", "kept.bvec", "kept.bval", "spec.json"})
    EXPECT_TRUE(fs::exists(root / "data" / f)) << f;
  for (const char* f : {"structural.qvol", "dwis.qvol", "dwis_raw.qvol", "mask.qvol", "dwis_kept.qvol"})
    EXPECT_TRUE(fs::exists(test_subject() / f)) << f;
  EXPECT_EQ(read_volume(test_subject() / "dwis.qvol").channel_count(), 12u);
  EXPECT_EQ(read_volume(test_subject() / "dwis_kept.qvol").channel_count(), 6u);
  EXPECT_TRUE(fs::exists(root / "model.qckpt"));
  EXPECT_TRUE(fs::exists(root / "model.qckpt.losses.csv"));
}

TEST_F(CliPipeline, SimulateIsReproducible) {
  const auto again = root / "again";
  ASSERT_EQ(qdwi_run({"simulate", "--spec", (root / "spec.json").string(), "--table",
                      (root / "full.bvec").string() + "," + (root / "full.bval").string(), "--seed", "5", "--out",
                      again.string(), "--downsample-rate", "0.5"})
                .code,
            0);
  for (const char* f : {"dwis_raw.qvol", "dwis_kept.qvol", "structural.qvol"})
    EXPECT_EQ(read_bytes(again / "test" / "subject_2" / f), read_bytes(test_subject() / f)) << f;
}

TEST_F(CliPipeline, TrainIsReproducibleAndResumable) {
  const auto once = root / "once.qckpt";
  ASSERT_EQ(qdwi_run({"train", "--config", (root / "train.json").string(), "--data", (root / "data").string(),
                      "--out", once.string(), "--log-every", "0"})
                .code,
            0);
  EXPECT_EQ(read_bytes(once), read_bytes(root / "model.qckpt"));

  auto config = testkit::tiny_train_config();
  config.steps = 2;
  write_file(root / "short.json", train_config_to_json(config));
  const auto part = root / "part.qckpt";
  ASSERT_EQ(qdwi_run({"train", "--config", (root / "short.json").string(), "--data", (root / "data").string(),
                      "--out", part.string()})
                .code,
            0);
  const auto resumed = root / "resumed.qckpt";
  ASSERT_EQ(qdwi_run({"train", "--config", (root / "train.json").string(), "--data", (root / "data").string(),
                      "--out", resumed.string(), "--resume", part.string()})
                .code,
            0);
  EXPECT_EQ(read_bytes(resumed), read_bytes(root / "model.qckpt"));

  std::ifstream csv(root / "model.qckpt.losses.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "step,g_adv,g_l1,g_total,d_loss");
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  EXPECT_EQ(rows, 4);
}

TEST_F(CliPipeline, EvaluateSelf) {
  const auto dwis = (test_subject() / "dwis.qvol").string();
  const auto before = read_bytes(dwis);
  const auto json_path = root / "self.json";
  const auto r = qdwi_run({"evaluate", "--pred", dwis, "--ref", dwis, "--mask", (test_subject() / "mask.qvol").string(),
                           "--json", json_path.string(), "--dti", "--table", table("table"), "--maps-dir",
                           (root / "maps").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["mae"].get<double>(), 0);
  EXPECT_EQ(j["ssim"].get<double>(), 1);
  EXPECT_EQ(j["psnr"], "inf");
  EXPECT_EQ(j["dti"]["fa"]["ssim"].get<double>(), 1);
  EXPECT_EQ(nlohmann::json::parse(std::ifstream(json_path)), j);
  EXPECT_TRUE(fs::exists(root / "maps" / "pred_fa.qvol"));
  EXPECT_EQ(read_bytes(dwis), before);
}

TEST_F(CliPipeline, RestoreWithNothingRemoved) {
  const auto dwis = (test_subject() / "dwis.qvol").string();
  const auto out = root / "restored_full.qvol";
  const auto r = qdwi_run({"restore", "--ckpt", (root / "model.qckpt").string(), "--dwis", dwis, "--kept-table",
                           table("table"), "--full-table", table("table"), "--structural",
                           (test_subject() / "structural.qvol").string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_volume(out), read_volume(dwis));
  const auto prov = nlohmann::json::parse(std::ifstream(out.string() + ".provenance.json"));
  for (const auto& p : prov["channels"]) EXPECT_EQ(p, "real");
}

TEST_F(CliPipeline, RestoreDownsampled) {
  const auto out = root / "restored.qvol";
  const auto r = qdwi_run({"restore", "--ckpt", (root / "model.qckpt").string(), "--dwis",
                           (test_subject() / "dwis_kept.qvol").string(), "--kept-table", table("kept"),
                           "--full-table", table("table"), "--structural",
                           (test_subject() / "structural.qvol").string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto restored = read_volume(out);
  const auto full = read_volume(test_subject() / "dwis.qvol");
  const auto kept = read_gradient_table(root / "data" / "kept.bvec", root / "data" / "kept.bval");
  const auto table_full = read_gradient_table(root / "data" / "table.bvec", root / "data" / "table.bval");
  ASSERT_EQ(restored.channel_count(), 12u);
  int synthetic = 0;
  const auto prov = nlohmann::json::parse(std::ifstream(out.string() + ".provenance.json"))["channels"];
  for (std::size_t i = 0; i < 12; ++i) {
    const bool is_kept = find_entry(kept, table_full[i]) >= 0;
    EXPECT_EQ(prov[i], is_kept ? "real" : "synthetic");
    synthetic += !is_kept;
    if (is_kept) EXPECT_EQ(restored.channel(i), full.channel(i));
  }
  EXPECT_EQ(synthetic, 6);
}

TEST_F(CliPipeline, RestoreRejectsForeignKeptEntry) {
  write_gradient_table(make_multishell_table({3000}, 6), root / "foreign.bvec", root / "foreign.bval");
  const auto r = qdwi_run({"restore", "--ckpt", (root / "model.qckpt").string(), "--dwis",
                           (test_subject() / "dwis_kept.qvol").string(), "--kept-table",
                           (root / "foreign.bvec").string() + "," + (root / "foreign.bval").string(), "--full-table",
                           table("table"), "--structural", (test_subject() / "structural.qvol").string(), "--out",
                           (root / "never.qvol").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(root / "never.qvol"));
}

TEST_F(CliPipeline, AnimateEndpointsMatchSynthesize) {
  const auto out = root / "frames";
  const auto structural = (test_subject() / "structural.qvol").string();
  const auto r = qdwi_run({"animate", "--ckpt", (root / "model.qckpt").string(), "--structural", structural,
                           "--from-dir", "1,0,0", "--to-dir", "0,1,0", "--bval", "1000", "--frames", "3", "--out",
                           out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto frames = nlohmann::json::parse(std::ifstream(out / "frames.json"));
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_EQ(frames[1]["t"].get<double>(), 0.5);
  EXPECT_NEAR(frames[1]["direction"][0].get<double>(), 1 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(frames[1]["direction"][1].get<double>(), 1 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(frames[1]["direction"][2].get<double>(), 0, 1e-12);

  write_file(root / "ends.bvec", "1 0\n0 1\n0 0\n");
  write_file(root / "ends.bval", "1000 1000\n");
  const auto synth = root / "ends.qvol";
  ASSERT_EQ(qdwi_run({"synthesize", "--ckpt", (root / "model.qckpt").string(), "--structural", structural, "--bvec",
                      (root / "ends.bvec").string(), "--bval", (root / "ends.bval").string(), "--out", synth.string()})
                .code,
            0);
  const auto ends = read_volume(synth);
  EXPECT_EQ(read_volume(out / "frame_000.qvol").channel(0), ends.channel(0));
  EXPECT_EQ(read_volume(out / "frame_002.qvol").channel(0), ends.channel(1));
}
