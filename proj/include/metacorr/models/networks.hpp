#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metacorr/autodiff/graph.hpp"
#include "metacorr/data/synthetic.hpp"
#include "metacorr/rng.hpp"

namespace metacorr::models {

using VarMap = std::unordered_map<std::string, ad::Var>;
using Labels = std::shared_ptr<const std::vector<int>>;

inline constexpr std::size_t kMaxSegmentationParams = 3000;
inline constexpr double kLeakySlope = 0.01;
inline constexpr double kLogFloor = 1e-12;

struct SegNetShape {
  std::size_t classes = 4;
  std::size_t hidden1 = 8;
  std::size_t hidden2 = 8;
};

// Segmentation weights w:
//   seg.layer1.{weight,bias}      3x3 window, 3 -> F1, leaky rectifier
//   seg.layer2.{weight,bias}      3x3 window, F1 -> F2, leaky rectifier
//   seg.head_deep.{weight,bias}   F2 -> C  (level 0)
//   seg.head_shallow.{weight,bias} F1 -> C (level 1)
// Throws std::invalid_argument when the count exceeds kMaxSegmentationParams.
ad::ParamSet init_segmentation(const SegNetShape& shape, std::uint64_t seed);

// Domain predictor u: dom.layer1 (3x3 window, 3 -> 8, leaky) and
// dom.head (8 -> 1, sigmoid).
ad::ParamSet init_domain_predictor(std::uint64_t seed, std::size_t hidden = 8);

std::size_t classes_of(const ad::ParamSet& w);

struct SegOutputs {
  ad::Var deep;     // per-pixel class probabilities, level 0
  ad::Var shallow;  // per-pixel class probabilities, level 1
};

// Whole-image evaluation. `pixels` is (images*H*W) x 3; borders are zero padded.
SegOutputs build_segmentation(ad::Graph& g, const VarMap& w, ad::Var pixels,
                              const ad::WindowGeometry& geometry);

// Evaluation at selected pixels only. For every site the 3x3 input windows of
// its 9 neighbours are stored, with a mask for neighbours outside the image,
// so the result equals whole-image evaluation at those pixels.
struct SiteWindows {
  std::size_t sites = 0;
  ad::Array neighbour_windows;  // (sites*9) x 27
  ad::Array neighbour_valid;    // (sites*9) x 1
  ad::Array center_windows;     // sites x 27
};

struct PixelSite {
  std::size_t image = 0;
  std::size_t y = 0;
  std::size_t x = 0;
};

SiteWindows gather_sites(std::span<const data::LabeledImage> images,
                         std::span<const PixelSite> sites);
SegOutputs build_segmentation_sites(ad::Graph& g, const VarMap& w, const SiteWindows& sites);

// Per-pixel target-likeness in (0, 1), shape (images*H*W) x 1.
ad::Var build_domain(ad::Graph& g, const VarMap& u, ad::Var pixels,
                     const ad::WindowGeometry& geometry);

// Non-differentiated evaluation helpers.
std::pair<ad::Array, ad::Array> forward_seg(const ad::Array& pixels,
                                            const ad::WindowGeometry& geometry,
                                            const ad::ParamSet& w);
ad::Array forward_domain(const ad::Array& pixels, const ad::WindowGeometry& geometry,
                         const ad::ParamSet& u);

// Mean over rows of -log(max(probs[i, labels[i]], floor)), optionally
// weighted: sum(weights * nll) / count where count is the number of nonzero
// weights.
ad::Var cross_entropy(ad::Var probs, const Labels& labels);
ad::Var masked_cross_entropy(ad::Var probs, const Labels& labels, const ad::Array& mask);
// Mean binary cross-entropy of scores in (0,1) against 0/1 targets.
ad::Var binary_cross_entropy(ad::Var scores, const ad::Array& targets);

// Row-wise argmax with ties to the lowest index.
std::vector<int> argmax_rows(const ad::Array& probs);

struct PretrainConfig {
  std::size_t steps = 300;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t batch_images = 4;
  std::uint64_t seed = 0;
};

// Minimizes deep-head source cross-entropy with momentum SGD.
ad::ParamSet pretrain_source(const ad::ParamSet& w, std::span<const data::LabeledImage> source,
                             const PretrainConfig& config);

// Binary cross-entropy with source -> 0, target -> 1; returns the frozen u0.
ad::ParamSet pretrain_domain(const ad::ParamSet& u, std::span<const data::LabeledImage> source,
                             std::span<const data::TargetImage> target,
                             const PretrainConfig& config);

// Picks k distinct indices from [0, n) (all of them when k >= n).
std::vector<std::size_t> sample_indices(CounterRng& rng, std::size_t n, std::size_t k);

// Checkpoint: params.f64 (concatenated, name order) + manifest.json.
void save_checkpoint(const ad::ParamSet& params, const std::filesystem::path& dir);
ad::ParamSet load_checkpoint(const std::filesystem::path& dir);

}  // namespace metacorr::models
