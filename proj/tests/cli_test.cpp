#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "metacorr_cli_test";

const char* kTiny =
    " --set data.height=8 --set data.width=8 --set data.images_per_domain=8"
    " --set pretrain.steps=30 --set optimizer.steps=20 --set optimizer.eval_every=10"
    " --set optimizer.batch_images=2 --set optimizer.meta_batch_pixels=32";

struct Result {
  int code;
  std::string out;
};

Result cli(const std::string& args) {
  const fs::path log = kRoot / "last_output.txt";
  fs::create_directories(kRoot);
  const std::string cmd = std::string(METACORR_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream s;
  s << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, s.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string out_dir(const std::string& name) { return " --set output_dir='\"" + (kRoot / name).string() + "\"'"; }

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream s(text);
  std::string line;
  while (std::getline(s, line)) {
    rows.emplace_back();
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) rows.back().push_back(cell);
    if (!line.empty() && line.back() == ',') rows.back().push_back("");
  }
  return rows;
}

TEST(Cli, GenerateIsIdempotentAndSelfDescribing) {
  ASSERT_EQ(cli("generate" + std::string(kTiny) + out_dir("gen_a")).code, 0);
  ASSERT_EQ(cli("generate" + std::string(kTiny) + out_dir("gen_b")).code, 0);
  for (const char* f : {"source_pixels.f64", "target_pixels.f64", "source_labels.i32", "manifest.json"})
    EXPECT_EQ(slurp(kRoot / "gen_a/dataset" / f), slurp(kRoot / "gen_b/dataset" / f)) << f;
  const auto manifest = nlohmann::json::parse(slurp(kRoot / "gen_a/dataset/manifest.json"));
  EXPECT_EQ(manifest["height"], 8);
  EXPECT_EQ(manifest["width"], 8);
  EXPECT_EQ(manifest["classes"], 4);
  EXPECT_EQ(fs::file_size(kRoot / "gen_a/dataset/source_pixels.f64"), 8u * 8 * 8 * 3 * 8);
}

TEST(Cli, SourceOnlyHasNoTargetLoss) {
  ASSERT_EQ(cli("train --set method='\"source_only\"'" + std::string(kTiny) + out_dir("src_only")).code, 0);
  const auto rows = csv_rows(slurp(kRoot / "src_only/history.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0][2], "loss_target_corrected");
  for (std::size_t r = 1; r < rows.size(); ++r) EXPECT_EQ(std::stod(rows[r][2]), 0.0);
}

TEST(Cli, TrainingIsByteReproducible) {
  const std::string args = "train" + std::string(kTiny) + " --set seed=5";
  ASSERT_EQ(cli(args + out_dir("rep_a")).code, 0);
  ASSERT_EQ(cli(args + out_dir("rep_b")).code, 0);
  for (const char* f : {"history.csv", "ntm_history.csv", "summary.csv", "target_predictions.pgm"})
    EXPECT_EQ(slurp(kRoot / "rep_a" / f), slurp(kRoot / "rep_b" / f)) << f;
}

TEST(Cli, MetaCorrectionMovesBothTransitionsOnNoisyLabels) {
  const auto r = cli("train" + std::string(kTiny) +
                     " --set 'noise.transition=[[0.5,0.5,0,0],[0,0.5,0.5,0],[0,0,1,0],[0.5,0,0,0.5]]'"
                     " --set optimizer.virtual_lr=0.01 --set optimizer.meta_lr=1" +
                     out_dir("noisy"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = csv_rows(slurp(kRoot / "noisy/history.csv"));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_GT(std::stod(rows[i][6]), 0.0);
    EXPECT_GT(std::stod(rows[i][7]), 0.0);
  }
}

TEST(Cli, EvalScoresASavedRun) {
  ASSERT_EQ(cli("train --set method='\"self_training\"'" + std::string(kTiny) + out_dir("for_eval")).code, 0);
  const auto r = cli("eval " + (kRoot / "for_eval").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = csv_rows(slurp(kRoot / "for_eval/eval.csv"));
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"class", "iou", "dice"}));
  const auto summary = csv_rows(slurp(kRoot / "for_eval/summary.csv"));
  EXPECT_NEAR(std::stod(rows[5][1]), std::stod(summary[1][3]), 1e-9);
}

TEST(Cli, AblationWritesSeedAndMeanRows) {
  const auto r = cli("ablation" + std::string(kTiny) +
                     " --set ablation.seeds=1 --set 'ablation.methods=[\"single_dmlc\"]'" + out_dir("abl"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = csv_rows(slurp(kRoot / "abl/ablation_summary.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1][0], "single_dmlc");
  EXPECT_EQ(rows[1][1], "0");
  EXPECT_EQ(rows[2][1], "mean");
  for (std::size_t c = 2; c < 6; ++c) EXPECT_EQ(rows[1][c], rows[2][c]);
  EXPECT_TRUE(fs::exists(kRoot / "abl/single_dmlc/seed_0/history.csv"));
}

TEST(Cli, OutputRootEnvironmentVariable) {
  const std::string root = (kRoot / "env_root").string();
  const std::string cmd = "METACORR_OUTPUT_ROOT=" + root + " " + METACORR_CLI +
                          " train --set method='\"source_only\"' --set output_dir='\"rel\"'" + kTiny +
                          " > /dev/null";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(kRoot / "env_root/rel/history.csv"));
}

TEST(Cli, ValidationErrorsExitWithOne) {
  auto r = cli("train --set method='\"bogus\"'");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("metacorrection"), std::string::npos) << r.out;
  EXPECT_EQ(cli("train --set optimizer.nope=1").code, 1);
  EXPECT_EQ(cli("train --config /nonexistent.toml").code, 1);
  EXPECT_EQ(cli("frobnicate").code, 1);
}

TEST(Cli, GradcheckPassesAndCatchesAFault) {
  auto r = cli("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("max_rel_err"), std::string::npos);
  r = cli("gradcheck --inject-fault softmax");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("softmax                          FAIL"), std::string::npos) << r.out;
}

}  // namespace
