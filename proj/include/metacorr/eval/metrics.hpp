#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "metacorr/autodiff/array.hpp"
#include "metacorr/autodiff/param_set.hpp"
#include "metacorr/data/synthetic.hpp"

namespace metacorr::eval {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// counts[j][k] = pixels with true class j predicted as k.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t c = 0) : classes(c), counts(c * c, 0) {}
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
  std::uint64_t total() const;
  void merge(const ConfusionMatrix& other);
};

ConfusionMatrix confusion(std::span<const int> pred, std::span<const int> truth, std::size_t classes);

// NaN for a class absent from both prediction and truth.
std::vector<double> iou_per_class(const ConfusionMatrix& cm);
// Mean over defined classes; throws MetricError when none is defined.
double miou(const ConfusionMatrix& cm);
// 1 for a class absent everywhere.
double dice(const ConfusionMatrix& cm, std::size_t cls);
double accuracy(const ConfusionMatrix& cm);

double ntm_frobenius_error(const ad::Array& estimate, const ad::Array& reference);
double pseudo_noise_rate(std::span<const int> pseudo, std::span<const int> truth);

// Sole reader of quarantined target labels.
class TruthAccess {
 public:
  static const std::vector<int>& labels(const data::QuarantinedLabels& truth, std::size_t image);
  // Truth maps passed through the noise process, one independent stream per
  // image. Used as synthetic pseudo labels with a known transition matrix.
  static std::vector<std::vector<int>> noisy_labels(const data::QuarantinedLabels& truth,
                                                    const data::NoiseSpec& spec);
};

struct TargetScore {
  ConfusionMatrix cm;
  double miou = 0.0;
  double accuracy = 0.0;
};

// Deep-head argmax against target truth over all target images.
TargetScore score_target(const ad::ParamSet& w, const data::Dataset& dataset);
std::vector<std::vector<int>> predict_target(const ad::ParamSet& w, const data::Dataset& dataset);

// Disagreement of per-image label maps with target truth, over all pixels.
double pseudo_noise_rate(const std::vector<std::vector<int>>& pseudo,
                         const data::QuarantinedLabels& truth);

}  // namespace metacorr::eval
