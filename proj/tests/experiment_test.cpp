#include <cmath>
#include <cstdlib>

#include <gtest/gtest.h>

#include "metacorr/experiment/experiment.hpp"

namespace metacorr::experiment {
namespace {

TEST(Config, DefaultsRoundTripThroughText) {
  ExperimentConfig c;
  c.noise_transition = ad::Array::identity(4);
  c.noise_transition->at(0, 0) = 0.7;
  c.noise_transition->at(0, 1) = 0.3;
  const std::string text = to_text(c);
  EXPECT_EQ(to_text(parse_config(text)), text);
  EXPECT_EQ(parse_config(text).optimizer.meta_lr, 0.11);
  EXPECT_EQ(parse_config(text).noise_transition->at(0, 1), 0.3);
}

TEST(Config, ParsesCommentsAndDottedKeys) {
  const auto c = parse_config(
      "# comment\n"
      "seed = 7   # trailing\n"
      "method = \"single_dmlc\"\n"
      "\n"
      "optimizer.alpha1 = 0.0\n"
      "output_dir = \"a#b\"\n"
      "ablation.methods = [\"source_only\"]\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.method, "single_dmlc");
  EXPECT_EQ(c.optimizer.alpha[1], 0.0);
  EXPECT_EQ(c.output_dir, "a#b");
  EXPECT_EQ(c.ablation_methods, std::vector<std::string>{"source_only"});
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(parse_config("nope = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("method = single_dmlc\n"), ConfigError);
  EXPECT_THROW(parse_config("[optimizer]\n"), ConfigError);
  EXPECT_THROW(parse_config("seed\n"), ConfigError);
  EXPECT_THROW(parse_config("noise.transition = [[1, 0]]\n"), ConfigError);
  ExperimentConfig c;
  c.method = "bogus";
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.noise_transition = ad::Array::identity(3);
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.optimizer.momentum = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, OverrideReplacesOneKey) {
  ExperimentConfig c;
  apply_override(c, "optimizer.steps=17");
  EXPECT_EQ(c.optimizer.steps, 17u);
  EXPECT_THROW(apply_override(c, "optimizer.step=17"), ConfigError);
}

TEST(Config, OutputRootPrefixesRelativeDirectories) {
  ::setenv("METACORR_OUTPUT_ROOT", "/tmp/root", 1);
  EXPECT_EQ(resolve_output("runs/a"), std::filesystem::path("/tmp/root/runs/a"));
  EXPECT_EQ(resolve_output("/abs"), std::filesystem::path("/abs"));
  ::unsetenv("METACORR_OUTPUT_ROOT");
  EXPECT_EQ(resolve_output("runs/a"), std::filesystem::path("runs/a"));
}

TEST(Ablation, MeanRowIsTheArithmeticMean) {
  const double nan = std::nan("");
  std::vector<RunSummary> rows{{"single_dmlc", 0, 0.5, 0.25, 0.1, 0.3, 0.0, 0},
                               {"single_dmlc", 1, 0.7, 0.35, 0.3, 0.1, 0.0, 0},
                               {"source_only", 0, 0.4, 0.2, nan, nan, 0.0, 0}};
  const std::string csv = ablation_csv(rows);
  const auto row = [&](const std::string& prefix) {
    const auto at = csv.find("\n" + prefix);
    EXPECT_NE(at, std::string::npos) << csv;
    std::vector<std::string> cells;
    std::string cell;
    for (std::size_t i = at + 1; i < csv.size() && csv[i] != '\n'; ++i) {
      if (csv[i] == ',') {
        cells.push_back(cell);
        cell.clear();
      } else {
        cell += csv[i];
      }
    }
    cells.push_back(cell);
    return cells;
  };
  const auto mean = row("single_dmlc,mean,");
  ASSERT_EQ(mean.size(), 10u);
  const double expected[] = {0.6, 0.3, 0.2, 0.2, 0.1, 0.05, 0.1, 0.1};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(std::stod(mean[i + 2]), expected[i], 1e-12) << i;
  const auto only = row("source_only,0,");
  EXPECT_EQ(only[4], "");
  EXPECT_EQ(only[5], "");
  const auto only_mean = row("source_only,mean,");
  EXPECT_EQ(only_mean[6], "0");
  EXPECT_EQ(only_mean[8], "");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "method,seed,target_accuracy,miou_target,ntm_error,meta_precision,"
            "target_accuracy_std,miou_target_std,ntm_error_std,meta_precision_std");
}

TEST(Pgm, TilesMapsWithOneGrayLevelPerClass) {
  const std::string pgm = label_pgm({{0, 1, 2, 3}, {3, 3, 3, 3}, {0, 0, 0, 0}}, 2, 2, 4, 2);
  const std::string header = "P5\n4 4\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + 16);
  EXPECT_EQ(pgm.substr(0, header.size()), header);
  const auto px = [&](std::size_t y, std::size_t x) {
    return static_cast<unsigned char>(pgm[header.size() + y * 4 + x]);
  };
  EXPECT_EQ(px(0, 0), 0);
  EXPECT_EQ(px(0, 1), 85);
  EXPECT_EQ(px(1, 0), 170);
  EXPECT_EQ(px(1, 1), 255);
  EXPECT_EQ(px(0, 2), 255);
  EXPECT_EQ(px(2, 0), 0);
  EXPECT_EQ(px(3, 3), 0);  // empty tile
}

ExperimentConfig tiny(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.data.height = 8;
  c.data.width = 8;
  c.data.images_per_domain = 8;
  c.pretrain.steps = 30;
  c.optimizer.steps = 20;
  c.optimizer.eval_every = 10;
  c.optimizer.batch_images = 2;
  c.optimizer.meta_batch_pixels = 32;
  return c;
}

TEST(Prepare, NoisyTruthPseudoLabelsFollowTheMatrix) {
  ExperimentConfig c = tiny(3);
  ad::Array t = ad::Array::identity(4);
  c.noise_transition = t;
  const Prepared clean = prepare(c);
  c.method = "source_only";
  EXPECT_EQ(run(c, clean).summary.pseudo_noise_rate, 0.0);
  t.at(2, 2) = 0.0;
  t.at(2, 3) = 1.0;
  c.noise_transition = t;
  const Prepared flipped = prepare(c);
  const RunSummary s = run(c, flipped).summary;
  EXPECT_GT(s.pseudo_noise_rate, 0.0);
  EXPECT_NEAR(s.ntm_error, std::sqrt(2.0), 1e-12);
  EXPECT_TRUE(std::isnan(s.meta_precision));
}

TEST(Run, MetaMethodsReportPrecision) {
  ExperimentConfig c = tiny(4);
  c.method = "single_dmlc";
  const RunSummary s = run(c, prepare(c)).summary;
  EXPECT_GE(s.meta_precision, 0.0);
  EXPECT_LE(s.meta_precision, 1.0);
  EXPECT_TRUE(std::isnan(s.ntm_error));
}

}  // namespace
}  // namespace metacorr::experiment
