#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "metacorr/data/synthetic.hpp"
#include "metacorr/meta/optimizer.hpp"
#include "metacorr/models/networks.hpp"

namespace metacorr::experiment {

using meta::ConfigError;

// Everything a command needs. The file format is flat `key = value` lines
// (a TOML subset): numbers, booleans, "strings" and [arrays], `#` comments.
//
//   seed, method, output_dir, data_dir
//   data.{height,width,classes,images_per_domain,sigma_source,shift_strength,invariant_fraction}
//   network.{hidden1,hidden2}
//   pretrain.{steps,learning_rate,momentum,batch_images}
//   optimizer.{virtual_lr,meta_lr,actual_lr,momentum,weight_decay,alpha0,alpha1,tau,steps,
//              pseudo_refresh_every,meta_batch_pixels,batch_images,eval_every,confidence_threshold}
//   noise.transition   C x C matrix; when set, target pseudo labels are the
//                      truth maps passed through it instead of model argmax
//   ablation.{seeds,methods}
//
// `seed` drives dataset generation, initialization, pretraining, training and
// label noise through separate derived streams.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string method = "metacorrection";
  std::filesystem::path output_dir = "runs/default";
  std::filesystem::path data_dir;  // empty: generate in memory from `data`
  data::DatasetConfig data;
  models::SegNetShape network;
  models::PretrainConfig pretrain;
  meta::OptimizerConfig optimizer;
  std::optional<ad::Array> noise_transition;
  std::size_t ablation_seeds = 5;
  std::vector<std::string> ablation_methods{"source_only", "self_training", "threshold_self_training",
                                            "single_dmlc", "metacorrection"};

  // Throws ConfigError (or DataError for dataset fields).
  void validate() const;
};

// Throws ConfigError naming the line on unknown keys or malformed values.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& file);
// `key=value` with the same value syntax as the file.
void apply_override(ExperimentConfig& config, std::string_view assignment);
// Every key, in a fixed order; parse_config(to_text(c)) reproduces c.
std::string to_text(const ExperimentConfig& config);

// Prefixes a relative output directory with $METACORR_OUTPUT_ROOT when set.
std::filesystem::path resolve_output(const std::filesystem::path& dir);

// Dataset, pretrained weights and target pseudo labels for one seed.
struct Prepared {
  data::Dataset dataset;
  ad::ParamSet w0;
  ad::ParamSet u0;
  meta::PseudoLabelMap pseudo;
  std::optional<ad::Array> t_true;
};

Prepared prepare(const ExperimentConfig& config);

struct RunSummary {
  std::string method;
  std::uint64_t seed = 0;
  double target_accuracy = 0.0;
  double miou_target = 0.0;
  double ntm_error = 0.0;       // T0 vs the injected matrix; NaN without one
  double meta_precision = 0.0;  // NaN for methods without a meta set
  double pseudo_noise_rate = 0.0;
  std::size_t fallback_count = 0;
};

struct RunOutput {
  meta::TrainResult result;
  RunSummary summary;
};

RunOutput run(const ExperimentConfig& config, const Prepared& prepared);

// history.csv, ntm_history.csv, summary.csv, config.toml, checkpoint/ (w),
// ntm/ (T) and tiled PGM label maps of target predictions and truth.
void write_run(const std::filesystem::path& dir, const ExperimentConfig& config,
               const Prepared& prepared, const RunOutput& output);

// One row per (method, seed) followed by a mean row per method, whose
// *_std columns hold the population standard deviation over seeds.
std::string ablation_csv(const std::vector<RunSummary>& rows);

// Tiled binary PGM (P5): one tile per map, gray level k * 255 / (C - 1).
std::string label_pgm(const std::vector<std::vector<int>>& maps, std::size_t height,
                      std::size_t width, std::size_t classes, std::size_t columns = 8);

}  // namespace metacorr::experiment
