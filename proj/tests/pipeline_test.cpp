#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gradinv/experiment.hpp"

using namespace gradinv;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "gradinv_pipeline" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

cli::ExperimentConfig small_config(const std::string& out_dir) {
  std::string text = R"({
    "dataset": {"type": "synthetic", "n": 4, "size": 8, "seed": 2},
    "model": {"name": "tiny-cnn", "classes": 10, "seed": 3},
    "schedule": {"epochs": 1, "batch_size": 1, "local_steps": 1, "mu": 0.0001,
                 "emit": "gradient", "seed": 5},
    "attack": {"objective": "agic", "iterations": 30, "seed": 6},
    "attack_records": [0, 1]
  })";
  cli::ExperimentConfig cfg = cli::parse_config(text);
  cfg.output_dir = out_dir;
  return cfg;
}

}  // namespace

TEST(Pipeline, EndToEndProducesArtifacts) {
  fs::path dir = fresh_dir("e2e");
  cli::ExperimentConfig cfg = small_config(dir.string());
  cli::run_experiment(cfg);
  EXPECT_TRUE(fs::exists(dir / "config.json"));
  EXPECT_TRUE(fs::exists(dir / "log.json"));
  EXPECT_TRUE(fs::exists(dir / "recon.json"));
  EXPECT_TRUE(fs::exists(dir / "results.csv"));
  EXPECT_TRUE(fs::exists(dir / "timing.csv"));
  EXPECT_TRUE(fs::exists(dir / "trace-r0.csv"));
  EXPECT_TRUE(fs::exists(dir / "grid-r0.ppm"));
  std::string manifest = slurp(dir / "MANIFEST");
  EXPECT_NE(manifest.find("stage simulate ok"), std::string::npos);
  EXPECT_NE(manifest.find("stage attack ok"), std::string::npos);
  EXPECT_NE(manifest.find("status ok"), std::string::npos);

  std::string results = slurp(dir / "results.csv");
  EXPECT_EQ(results.substr(0, results.find("\r\n")), "run-id,slot,truth-index,psnr-db,ssim");
  int lines = 0;
  for (char c : results) {
    if (c == '\n') ++lines;
  }
  EXPECT_EQ(lines, 3);  // header + 2 records x B=1
}

TEST(Pipeline, DeterministicResultsAcrossRuns) {
  fs::path dir_a = fresh_dir("det_a");
  fs::path dir_b = fresh_dir("det_b");
  cli::ExperimentConfig a = small_config(dir_a.string());
  cli::ExperimentConfig b = small_config(dir_b.string());
  cli::run_experiment(a);
  cli::run_experiment(b);
  EXPECT_EQ(slurp(dir_a / "results.csv"), slurp(dir_b / "results.csv"));
  EXPECT_EQ(slurp(dir_a / "log.json"), slurp(dir_b / "log.json"));
  EXPECT_EQ(slurp(dir_a / "recon.json"), slurp(dir_b / "recon.json"));
  EXPECT_EQ(slurp(dir_a / "grid-r0.ppm"), slurp(dir_b / "grid-r0.ppm"));
}

TEST(Pipeline, GridHasReconstructionAndTruthRows) {
  fs::path dir = fresh_dir("grid");
  cli::ExperimentConfig cfg = small_config(dir.string());
  cli::run_experiment(cfg);
  std::string ppm = slurp(dir / "grid-r0.ppm");
  // one tile per row, 8x8 tiles: 9 wide, 18 tall
  EXPECT_EQ(ppm.substr(0, 10), std::string("P6\n9 18\n25"));
}

TEST(Pipeline, MultiepochStagesRunAndReport) {
  fs::path dir = fresh_dir("multiepoch");
  std::string text = R"({
    "dataset": {"type": "synthetic", "n": 4, "size": 8, "seed": 2},
    "model": {"name": "tiny-cnn", "classes": 10, "seed": 3},
    "schedule": {"epochs": 2, "batch_size": 1, "local_steps": 1, "mu": 0.0001,
                 "emit": "gradient", "seed": 5},
    "attack": {"objective": "agic", "iterations": 25, "seed": 6},
    "multiepoch": {"enabled": true, "pre_iterations": 25, "gammas": [1.0, 0.1]},
    "attack_records": [0]
  })";
  cli::ExperimentConfig cfg = cli::parse_config(text);
  cfg.output_dir = dir.string();
  cli::run_experiment(cfg);
  EXPECT_TRUE(fs::exists(dir / "matches.csv"));
  EXPECT_TRUE(fs::exists(dir / "grid-joint.ppm"));
  std::string results = slurp(dir / "results.csv");
  EXPECT_EQ(results.substr(0, results.find("\r\n")),
            "run-id,slot,truth-index,psnr-db,ssim,phase");
  EXPECT_NE(results.find("joint"), std::string::npos);
  std::string matches = slurp(dir / "matches.csv");
  int lines = 0;
  for (char c : matches) {
    if (c == '\n') ++lines;
  }
  EXPECT_EQ(lines, 5);  // header + 4 slot pairs
}

TEST(Pipeline, FailedStageRecordedInManifest) {
  fs::path dir = fresh_dir("failure");
  cli::ExperimentConfig cfg = small_config(dir.string());
  cfg.dataset.n = 2;
  cfg.attack_records = {5};  // out of range: only 2 records exist
  EXPECT_THROW(cli::run_experiment(cfg), ConfigError);
  std::string manifest = slurp(dir / "MANIFEST");
  EXPECT_NE(manifest.find("stage simulate ok"), std::string::npos);
  EXPECT_NE(manifest.find("stage attack failed"), std::string::npos);
  EXPECT_NE(manifest.find("status failed"), std::string::npos);
  // partial artifacts retained
  EXPECT_TRUE(fs::exists(dir / "log.json"));
}

TEST(Pipeline, SelftestPasses) {
  std::ostringstream out;
  EXPECT_TRUE(cli::run_selftest(out));
  EXPECT_NE(out.str().find("selftest passed"), std::string::npos);
}
