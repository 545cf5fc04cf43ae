// metacorr: generate | train | eval | ablation | gradcheck
//
// Exit codes: 0 success, 1 validation or I/O error, 2 numerical-check failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "metacorr/check/suites.hpp"
#include "metacorr/eval/metrics.hpp"
#include "metacorr/experiment/experiment.hpp"

namespace fs = std::filesystem;
using namespace metacorr;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kNumerical = 2;

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_file, "Config file (key = value lines)");
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set optimizer.steps=500")
      ->allow_extra_args(false);
}

experiment::ExperimentConfig resolve(const Common& c) {
  experiment::ExperimentConfig cfg =
      c.config_file.empty() ? experiment::ExperimentConfig{} : experiment::load_config(c.config_file);
  for (const std::string& o : c.overrides) experiment::apply_override(cfg, o);
  cfg.validate();
  cfg.output_dir = experiment::resolve_output(cfg.output_dir);
  return cfg;
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << text;
}

int cmd_generate(const Common& c) {
  const auto cfg = resolve(c);
  const fs::path dir = cfg.data_dir.empty() ? cfg.output_dir / "dataset" : experiment::resolve_output(cfg.data_dir);
  data::DatasetConfig dc = cfg.data;
  dc.seed = cfg.seed;
  data::save_dataset(data::generate_dataset(dc), dir);
  std::printf("dataset written to %s\n", dir.string().c_str());
  return kOk;
}

void print_summary(const experiment::RunSummary& s) {
  std::printf("%-24s seed %llu  target_accuracy %.4f  miou_target %.4f", s.method.c_str(),
              static_cast<unsigned long long>(s.seed), s.target_accuracy, s.miou_target);
  if (!std::isnan(s.ntm_error)) std::printf("  ntm_error %.4f", s.ntm_error);
  if (!std::isnan(s.meta_precision)) std::printf("  meta_precision %.4f", s.meta_precision);
  std::printf("\n");
}

int cmd_train(const Common& c) {
  const auto cfg = resolve(c);
  const experiment::Prepared p = experiment::prepare(cfg);
  const experiment::RunOutput out = experiment::run(cfg, p);
  experiment::write_run(cfg.output_dir, cfg, p, out);
  print_summary(out.summary);
  std::printf("outputs in %s\n", cfg.output_dir.string().c_str());
  return kOk;
}

int cmd_eval(const fs::path& run_dir) {
  auto cfg = experiment::load_config(run_dir / "config.toml");
  cfg.validate();
  data::Dataset ds;
  if (cfg.data_dir.empty()) {
    data::DatasetConfig dc = cfg.data;
    dc.seed = cfg.seed;
    ds = data::generate_dataset(dc);
  } else {
    ds = data::load_dataset(cfg.data_dir);
  }
  const ad::ParamSet w = models::load_checkpoint(run_dir / "checkpoint");
  const eval::TargetScore score = eval::score_target(w, ds);
  const std::vector<double> iou = eval::iou_per_class(score.cm);
  std::ostringstream csv;
  csv << "class,iou,dice\n";
  csv.precision(10);
  for (std::size_t k = 0; k < score.cm.classes; ++k) {
    csv << k << ",";
    if (!std::isnan(iou[k])) csv << iou[k];
    csv << "," << eval::dice(score.cm, k) << "\n";
  }
  csv << "mean," << score.miou << ",\n";
  write_text(run_dir / "eval.csv", csv.str());
  std::printf("target_accuracy %.4f  miou_target %.4f\n", score.accuracy, score.miou);
  std::fputs(csv.str().c_str(), stdout);
  return kOk;
}

int cmd_ablation(const Common& c) {
  const auto base = resolve(c);
  std::vector<experiment::RunSummary> rows;
  for (std::size_t i = 0; i < base.ablation_seeds; ++i) {
    experiment::ExperimentConfig cfg = base;
    cfg.seed = base.seed + i;
    const experiment::Prepared p = experiment::prepare(cfg);
    for (const std::string& m : base.ablation_methods) {
      cfg.method = m;
      const experiment::RunOutput out = experiment::run(cfg, p);
      experiment::write_run(base.output_dir / m / ("seed_" + std::to_string(cfg.seed)), cfg, p, out);
      print_summary(out.summary);
      rows.push_back(out.summary);
    }
  }
  // Seed-major execution, method-major table.
  std::vector<experiment::RunSummary> ordered;
  for (const std::string& m : base.ablation_methods)
    for (const auto& r : rows)
      if (r.method == m) ordered.push_back(r);
  const std::string table = experiment::ablation_csv(ordered);
  write_text(base.output_dir / "ablation_summary.csv", table);
  std::fputs(table.c_str(), stdout);
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& fault_op) {
  std::optional<check::FaultInjection> fault;
  if (!fault_op.empty()) {
    for (int k = 0; k <= static_cast<int>(ad::OpKind::kFold); ++k)
      if (ad::op_name(static_cast<ad::OpKind>(k)) == fault_op)
        fault = check::FaultInjection{static_cast<ad::OpKind>(k), 1.5};
    if (!fault) throw experiment::ConfigError("unknown op for --inject-fault: " + fault_op);
  }
  const auto results = check::run_all_checks(seed, fault);
  std::fputs(check::format_report(results).c_str(), stdout);
  for (const auto& r : results)
    if (!r.passed) {
      std::printf("gradcheck FAILED\n");
      return kNumerical;
    }
  std::printf("gradcheck passed (%zu checks)\n", results.size());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned label correction on synthetic segmentation"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("generate", "Write the synthetic dataset to disk");
  add_common(gen, common);
  auto* train = app.add_subcommand("train", "Pretrain, then train the configured method");
  add_common(train, common);
  auto* ev = app.add_subcommand("eval", "Score a trained run on target truth");
  std::string run_dir;
  ev->add_option("run_dir", run_dir, "Directory written by train")->required();
  auto* abl = app.add_subcommand("ablation", "All configured methods over several seeds");
  add_common(abl, common);
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference checks of every gradient path");
  std::uint64_t check_seed = 0;
  std::string fault;
  grad->add_option("--seed", check_seed, "Seed of the random check instances");
  grad->add_option("--inject-fault", fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*gen) return cmd_generate(common);
    if (*train) return cmd_train(common);
    if (*ev) return cmd_eval(run_dir);
    if (*abl) return cmd_ablation(common);
    if (*grad) return cmd_gradcheck(check_seed, fault);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvalid;
  }
  return kInvalid;
}
