#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "metacorr/autodiff/graph.hpp"
#include "metacorr/data/synthetic.hpp"
#include "metacorr/models/networks.hpp"

namespace metacorr::meta {

inline constexpr std::size_t kLevels = 2;
inline constexpr double kFallbackQuantile = 0.05;
using Transitions = std::array<ad::Array, kLevels>;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StaleRecordError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct OptimizerConfig {
  double virtual_lr = 1e-4;
  double meta_lr = 0.11;
  double actual_lr = 2.5e-4;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  std::array<double, kLevels> alpha{1.0, 0.1};
  double tau = 0.5;
  std::size_t steps = 2000;
  std::size_t pseudo_refresh_every = 0;
  std::size_t meta_batch_pixels = 256;
  std::size_t batch_images = 4;
  std::size_t eval_every = 50;
  double confidence_threshold = 0.9;  // threshold_self_training only
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

enum class Method { kSourceOnly, kSelfTraining, kThresholdSelfTraining, kSingleDmlc, kMetaCorrection };

std::string_view method_name(Method m);
// Throws ConfigError listing the valid names.
Method parse_method(std::string_view name);
const std::vector<Method>& all_methods();

// ---- pseudo labels -------------------------------------------------------

struct PseudoLabelMap {
  std::vector<std::vector<int>> maps;           // per target image, H*W
  std::vector<std::vector<double>> confidence;  // max deep-head probability of the generating model
  std::size_t generated_at = 0;
};

PseudoLabelMap generate_pseudo_labels(const ad::ParamSet& w,
                                      std::span<const data::TargetImage> target,
                                      std::size_t iteration = 0);

// ---- meta set ------------------------------------------------------------

struct MetaEntry {
  models::PixelSite site;
  int label = 0;
  double score = 0.0;
  bool fallback = false;
};

struct MetaSet {
  std::vector<MetaEntry> entries;
  bool fallback = false;

  std::size_t fallback_count() const;
  // Fraction of entries on the source invariant mask.
  double invariant_precision(std::span<const data::LabeledImage> source) const;
};

// Source pixels with domain score > tau. When fewer than `minimum` qualify,
// returns the top 5% of source pixels by score instead; entries at or below
// tau are then flagged as fallback.
MetaSet select_meta_set(const ad::ParamSet& u, std::span<const data::LabeledImage> source,
                        double tau, std::size_t minimum);

// ---- single steps --------------------------------------------------------

// Whole images with per-pixel labels (ground truth for source, pseudo
// labels for target).
struct ImageBatch {
  ad::Array pixels;
  ad::WindowGeometry geometry;
  models::Labels labels;
};
using SourceBatch = ImageBatch;
using TargetBatch = ImageBatch;

struct MetaBatch {
  models::SiteWindows windows;
  models::Labels labels;
};

MetaBatch make_meta_batch(std::span<const data::LabeledImage> source,
                          std::span<const MetaEntry> entries);

struct MetaGradient {
  double meta_loss = 0.0;  // deep-head CE of the meta batch at w_hat
  Transitions grad;        // d meta_loss / d T per level
};

// The virtual update w_hat = w - gamma_v * grad_w sum_l alpha_l corrected_loss_l,
// kept as a graph so the meta step can differentiate it with respect to T.
class VirtualRecord {
 public:
  VirtualRecord() = default;
  VirtualRecord(VirtualRecord&&) noexcept = default;
  VirtualRecord& operator=(VirtualRecord&&) noexcept = default;

  const ad::ParamSet& w_hat() const { return w_hat_; }
  double corrected_loss() const { return loss_; }
  bool consumed() const { return consumed_; }

 private:
  friend VirtualRecord virtual_step(const ad::ParamSet&, const TargetBatch&, const Transitions&,
                                    const std::array<double, kLevels>&, double);
  friend MetaGradient meta_gradient(const ad::ParamSet&, VirtualRecord&, const MetaBatch&,
                                           const Transitions&);

  std::unique_ptr<ad::Graph> graph_;
  std::vector<ad::Var> first_;  // grad_w of the corrected loss, w name order
  std::vector<std::string> levels_;
  ad::ParamSet w_hat_;
  double virtual_lr_ = 0.0;
  double loss_ = 0.0;
  std::uint64_t w_checksum_ = 0;
  std::uint64_t t_checksum_ = 0;
  bool consumed_ = false;
};

VirtualRecord virtual_step(const ad::ParamSet& w, const TargetBatch& batch, const Transitions& T,
                           const std::array<double, kLevels>& alpha, double virtual_lr);

// Consumes the record; throws StaleRecordError when the record was already
// used or w / T changed since the virtual step.
MetaGradient meta_gradient(const ad::ParamSet& w, VirtualRecord& record, const MetaBatch& batch,
                           const Transitions& T);

struct MetaStepResult {
  double meta_loss = 0.0;
  std::size_t projection_fallbacks = 0;
};

// T <- project_row_stochastic(T - meta_lr * grad) for every level.
MetaStepResult meta_step(const ad::ParamSet& w, VirtualRecord& record, const MetaBatch& batch,
                         Transitions& T, double meta_lr);

enum class TargetObjective { kNone, kPlain, kMasked, kCorrected };

struct ActualStepInput {
  const SourceBatch* source = nullptr;
  const TargetBatch* target = nullptr;
  TargetObjective objective = TargetObjective::kNone;
  const ad::Array* mask = nullptr;  // kMasked
  const Transitions* T = nullptr;   // kCorrected
  std::array<double, kLevels> alpha{1.0, 0.1};
};

struct ActualStepLosses {
  double source = 0.0;
  double target = 0.0;  // weighted target term, 0 without one
  std::size_t floored = 0;
};

// One momentum SGD step with weight decay on source CE (deep head) plus the
// selected target term; T is treated as a constant.
ActualStepLosses actual_step(ad::ParamSet& w, ad::ParamSet& velocity, const ActualStepInput& in,
                             const OptimizerConfig& config);

// Objective value of actual_step at w without updating.
double actual_objective(const ad::ParamSet& w, const ActualStepInput& in);

// ---- training ------------------------------------------------------------

struct HistoryRow {
  std::size_t iteration = 0;
  double loss_source = 0.0;
  double loss_target_corrected = 0.0;
  double meta_loss = 0.0;
  double miou_target = 0.0;
  double pseudo_noise_rate = 0.0;
  double ntm_frob_t0 = 0.0;
  double ntm_frob_t1 = 0.0;
  std::size_t fallback_count = 0;
  Transitions T;
};

struct Diagnostics {
  std::size_t log_floor_hits = 0;
  std::size_t projection_fallbacks = 0;
};

struct TrainResult {
  ad::ParamSet w;
  Transitions T;
  std::vector<HistoryRow> history;
  MetaSet meta_set;
  Diagnostics diagnostics;
};

struct TrainInputs {
  const data::Dataset* dataset = nullptr;
  const ad::ParamSet* w0 = nullptr;
  const ad::ParamSet* u0 = nullptr;
  const PseudoLabelMap* pseudo = nullptr;  // labels for the target terms
};

TrainResult train_metacorrection(const OptimizerConfig& config, const TrainInputs& in);
// source_only, self_training, threshold_self_training, single_dmlc. Throws
// ConfigError for kMetaCorrection.
TrainResult train_baseline(Method kind, const OptimizerConfig& config, const TrainInputs& in);
TrainResult train(Method method, const OptimizerConfig& config, const TrainInputs& in);

std::string history_csv(const std::vector<HistoryRow>& history);
std::string ntm_history_csv(const std::vector<HistoryRow>& history);

}  // namespace metacorr::meta
