#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <algorithm>
#include <cstdlib>
#include <sstream>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "diffsr/config.hpp"
#include "diffsr/dataset.hpp"
#include "diffsr/error.hpp"
#include "diffsr/pipeline.hpp"
#include "diffsr/render.hpp"

namespace fs = std::filesystem;
using namespace diffsr;

namespace {

const char* kTiny = R"(
seed = 3
[data]
scenes = 4
rows = 64
cols = 64
train_scenes = 3
[patch]
gamma = 10
[transform]
depth = 1
embed_dim = 32
steps = 6
[diffusion]
base_channels = 8
depth = 2
time_dim = 16
T = 8
steps = 6
batch = 2
[sample]
stride = 32
)";

class Scratch {
 public:
  Scratch() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() /
           ("diffsr_" + std::string(info->test_suite_name()) + "_" + info->name() + "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Scratch() { fs::remove_all(dir_); }
  std::string operator/(const std::string& name) const { return (dir_ / name).string(); }

 private:
  fs::path dir_;
};

RunConfig tiny(const std::string& extra = "") { return parse_config(std::string(kTiny) + extra); }

std::string bytes(const std::string& path) { return read_text(path); }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DIFFSR_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// gen-data, train tm and train diff into `s`; returns the config with every path set.
RunConfig trained(const Scratch& s, ConditionMode mode = ConditionMode::Both) {
  RunConfig cfg = tiny();
  cfg.paths.data = cmd_gen_data(cfg, s / "data");
  cfg.paths.tm_bundle = cmd_train_tm(cfg, s / "tm");
  cfg.diffusion.model.mode = mode;
  cfg.paths.diff_bundle = cmd_train_diff(cfg, s / "diff");
  return cfg;
}

}  // namespace

TEST(Pipeline, GenDataWritesScenesAndResolvedConfig) {
  Scratch s;
  const RunConfig cfg = tiny();
  const std::string manifest = cmd_gen_data(cfg, s / "data");
  EXPECT_EQ(read_manifest(manifest).entries.size(), 4u);
  const RunConfig back = load_config(s / "data/config.toml");
  EXPECT_EQ(fs::path(back.paths.data), fs::absolute(manifest).lexically_normal());
  EXPECT_FALSE(fs::exists(s / "data/.lock"));
}

TEST(Pipeline, GenDataIsDeterministic) {
  Scratch s;
  const RunConfig cfg = tiny();
  const std::string a = cmd_gen_data(cfg, s / "a");
  const std::string b = cmd_gen_data(cfg, s / "b");
  EXPECT_EQ(bytes(a), bytes(b));
  const auto ma = read_manifest(a);
  for (const auto& e : ma.entries)
    EXPECT_EQ(bytes((fs::path(s / "a") / e.radar).string()), bytes((fs::path(s / "b") / e.radar).string()));
}

TEST(Pipeline, LockedDirectoryIsRefused) {
  Scratch s;
  RunLock held(s / "run");
  try {
    cmd_gen_data(tiny(), s / "run");
    FAIL() << "second writer accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
  EXPECT_FALSE(fs::exists(s / "run/manifest.json"));
}

TEST(Pipeline, TrainDiffWithoutStageOneFails) {
  Scratch s;
  RunConfig cfg = tiny();
  cfg.paths.data = cmd_gen_data(cfg, s / "data");
  try {
    cmd_train_diff(cfg, s / "diff");
    FAIL() << "trained without a stage-1 bundle";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingInput);
    EXPECT_NE(std::string(e.what()).find("paths.tm_bundle"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(s / "diff/diff.bundle"));
}

TEST(Pipeline, SatelliteModeNeedsNoStageOne) {
  Scratch s;
  RunConfig cfg = tiny("");
  cfg.paths.data = cmd_gen_data(cfg, s / "data");
  cfg.diffusion.model.mode = ConditionMode::SatelliteOnly;
  EXPECT_NO_THROW(cmd_train_diff(cfg, s / "diff"));
}

TEST(Pipeline, TrainingLogsAreReproducible) {
  Scratch s;
  RunConfig cfg = tiny();
  cfg.paths.data = cmd_gen_data(cfg, s / "data");
  cfg.paths.tm_bundle = cmd_train_tm(cfg, s / "tm1");
  cmd_train_tm(cfg, s / "tm2");
  EXPECT_EQ(bytes(s / "tm1/loss.csv"), bytes(s / "tm2/loss.csv"));
  EXPECT_EQ(bytes(s / "tm1/tm.bundle"), bytes(s / "tm2/tm.bundle"));
  cmd_train_diff(cfg, s / "d1");
  cmd_train_diff(cfg, s / "d2");
  EXPECT_EQ(bytes(s / "d1/loss.csv"), bytes(s / "d2/loss.csv"));
  const std::string loss = bytes(s / "d1/loss.csv");
  EXPECT_EQ(loss.rfind("step,loss\n", 0), 0u);
  EXPECT_EQ(std::count(loss.begin(), loss.end(), '\n'), 7);
}

TEST(Pipeline, SampleShapesRangeAndDeterminism) {
  Scratch s;
  RunConfig cfg = trained(s);
  const std::string pred = cmd_sample(cfg, s / "sample1");
  cmd_sample(cfg, s / "sample2");
  const auto fields = load_radar_fields(pred);
  ASSERT_EQ(fields.size(), 1u);  // the single validation scene
  const auto truth = load_scenes(cfg.paths.data);
  const Field& f = fields[0].field;
  EXPECT_EQ(f.rows(), 64);
  EXPECT_EQ(f.cols(), 64);
  for (float v : f.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 60.0f);
  }
  const std::string id = fields[0].id;
  EXPECT_EQ(id, truth.back().id);
  const std::string raw = bytes(s / ("sample1/png/" + id + "_sample.png"));
  const Image png = decode_png(std::vector<std::uint8_t>(raw.begin(), raw.end()));
  EXPECT_EQ(png.width, 64);
  EXPECT_EQ(png.height, 64);
  const auto m1 = read_manifest(pred);
  const auto m2 = read_manifest(s / "sample2/pred/manifest.json");
  EXPECT_EQ(bytes((fs::path(s / "sample1/pred") / m1.entries[0].radar).string()),
            bytes((fs::path(s / "sample2/pred") / m2.entries[0].radar).string()));
  EXPECT_TRUE(fs::exists(s / "sample1/estimate/manifest.json"));

  cfg.sample.seed += 1;
  const std::string other = cmd_sample(cfg, s / "sample3");
  const auto m3 = read_manifest(other);
  EXPECT_NE(bytes((fs::path(s / "sample1/pred") / m1.entries[0].radar).string()),
            bytes((fs::path(s / "sample3/pred") / m3.entries[0].radar).string()));
}

TEST(Pipeline, SampleUnknownSceneFails) {
  Scratch s;
  RunConfig cfg = trained(s);
  cfg.sample.scenes = {"no_such_scene"};
  EXPECT_THROW(cmd_sample(cfg, s / "sample"), Error);
}

TEST(Pipeline, EvaluateTruthAgainstItself) {
  Scratch s;
  RunConfig cfg = tiny();
  cfg.paths.data = cmd_gen_data(cfg, s / "data");
  const std::string csv = cmd_evaluate(cfg, cfg.paths.data, cfg.paths.data, s / "eval", "truth");
  std::istringstream lines(bytes(csv));
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(std::count(line.begin(), line.end(), ',') + 1, 13);  // scene, model and 11 metrics
  int rows = 0;
  while (std::getline(lines, line)) {
    ++rows;
    std::istringstream cells(line);
    std::string scene, model, rmse, ssim;
    std::getline(cells, scene, ',');
    std::getline(cells, model, ',');
    std::getline(cells, rmse, ',');
    std::getline(cells, ssim, ',');
    EXPECT_EQ(model, "truth");
    EXPECT_EQ(std::stod(rmse), 0.0);
    EXPECT_NEAR(std::stod(ssim), 1.0, 1e-9);
  }
  EXPECT_EQ(rows, 5);  // four scenes and the mean
  EXPECT_TRUE(fs::exists(s / "eval/metrics_full.csv"));
  EXPECT_TRUE(fs::exists(s / "eval/metrics.png"));
}

TEST(Pipeline, EvaluateMissingTruthFails) {
  Scratch s;
  RunConfig cfg = tiny();
  cfg.paths.data = cmd_gen_data(cfg, s / "data");
  auto scenes = load_scenes(cfg.paths.data);
  std::vector<NamedField> one{{scenes[0].id, scenes[0].radar}};
  const std::string truth = write_radar_fields(one, s / "truth");
  try {
    cmd_evaluate(cfg, cfg.paths.data, truth, s / "eval", "m");
    FAIL() << "missing truth accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingInput);
    EXPECT_NE(std::string(e.what()).find(scenes[1].id), std::string::npos);
  }
}

TEST(Pipeline, AblationRowsAndConditionWidths) {
  Scratch s;
  RunConfig cfg = tiny();
  cfg.paths.data = cmd_gen_data(cfg, s / "data");
  std::vector<AblationRow> rows;
  cmd_ablate(cfg, s / "ablate", &rows);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].mode, ConditionMode::SatelliteOnly);
  EXPECT_EQ(rows[1].mode, ConditionMode::EstimateOnly);
  EXPECT_EQ(rows[2].mode, ConditionMode::Both);
  const auto width = [&](const char* mode) {
    std::ifstream f(s / (std::string("ablate/") + mode + "/denoiser.json"));
    return nlohmann::json::parse(f).at("condition_channels").get<int>();
  };
  EXPECT_EQ(width("satellite"), 4);
  EXPECT_EQ(width("estimate"), 1);
  EXPECT_EQ(width("both"), 5);
  const std::string csv = bytes(s / "ablate/ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_TRUE(fs::exists(s / "ablate/ablation.md"));
}

TEST(Cli, HelpAndErrors) {
  Scratch s;
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_NE(run_cli("frobnicate"), 0);
  EXPECT_NE(run_cli("gen-data"), 0);  // --out is required
  std::ofstream(s / "bad.toml") << "[data]\nsceens = 3\n";
  EXPECT_NE(run_cli("gen-data --config " + (s / "bad.toml") + " --out " + (s / "x")), 0);
  EXPECT_FALSE(fs::exists(s / "x/manifest.json"));
}

TEST(Cli, GenDataUnwritableOutputFails) {
  Scratch s;
  std::ofstream(s / "file") << "x";
  EXPECT_NE(run_cli("gen-data --out " + (s / "file/sub")), 0);
  EXPECT_FALSE(fs::exists(s / "file/sub/manifest.json"));
}

TEST(Cli, EndToEndMatchesLibrary) {
  Scratch s;
  std::ofstream(s / "tiny.toml") << kTiny;
  const std::string cfg = " --config " + (s / "tiny.toml");
  ASSERT_EQ(run_cli("gen-data" + cfg + " --out " + (s / "data")), 0);
  ASSERT_EQ(run_cli("gen-data" + cfg + " --out " + (s / "data2")), 0);
  EXPECT_EQ(bytes(s / "data/manifest.json"), bytes(s / "data2/manifest.json"));
  const std::string data = " --data " + (s / "data/manifest.json");
  EXPECT_NE(run_cli("train diff" + cfg + data + " --out " + (s / "diff")), 0);
  ASSERT_EQ(run_cli("train tm" + cfg + data + " --out " + (s / "tm")), 0);
  const std::string tm = " --tm-bundle " + (s / "tm/tm.bundle");
  ASSERT_EQ(run_cli("train diff" + cfg + data + tm + " --mode estimate --out " + (s / "diff")), 0);
  std::ifstream f(s / "diff/denoiser.json");
  EXPECT_EQ(nlohmann::json::parse(f).at("condition_channels").get<int>(), 1);
  ASSERT_EQ(run_cli("sample" + cfg + data + tm + " --diff-bundle " + (s / "diff/diff.bundle") + " --out " +
                    (s / "sample")),
            0);
  ASSERT_EQ(run_cli("evaluate" + cfg + " --pred " + (s / "sample/pred/manifest.json") + data + " --out " +
                    (s / "eval")),
            0);
  EXPECT_TRUE(fs::exists(s / "eval/metrics.csv"));

  // Same seeds through the library give the same stage-1 weights.
  RunConfig lib = tiny();
  lib.paths.data = s / "data/manifest.json";
  cmd_train_tm(lib, s / "tm_lib");
  EXPECT_EQ(bytes(s / "tm/tm.bundle"), bytes(s / "tm_lib/tm.bundle"));
}
