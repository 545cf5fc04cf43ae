#include "metacorr/eval/metrics.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "metacorr/models/networks.hpp"

namespace metacorr::eval {

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes != classes) throw MetricError("cannot merge confusion matrices of different size");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

ConfusionMatrix confusion(std::span<const int> pred, std::span<const int> truth, std::size_t classes) {
  if (pred.size() != truth.size())
    throw MetricError("prediction has " + std::to_string(pred.size()) + " pixels, truth has " +
                      std::to_string(truth.size()));
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || truth[i] < 0 || static_cast<std::size_t>(pred[i]) >= classes ||
        static_cast<std::size_t>(truth[i]) >= classes)
      throw MetricError("class id out of range at pixel " + std::to_string(i));
    ++cm.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
  }
  return cm;
}

namespace {

struct ClassCounts {
  double tp = 0, fp = 0, fn = 0;
};

ClassCounts counts_for(const ConfusionMatrix& cm, std::size_t c) {
  ClassCounts k;
  k.tp = static_cast<double>(cm.at(c, c));
  for (std::size_t o = 0; o < cm.classes; ++o) {
    if (o == c) continue;
    k.fp += static_cast<double>(cm.at(o, c));
    k.fn += static_cast<double>(cm.at(c, o));
  }
  return k;
}

}  // namespace

std::vector<double> iou_per_class(const ConfusionMatrix& cm) {
  std::vector<double> out(cm.classes);
  for (std::size_t c = 0; c < cm.classes; ++c) {
    const ClassCounts k = counts_for(cm, c);
    const double denom = k.tp + k.fp + k.fn;
    out[c] = denom > 0 ? k.tp / denom : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

double miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double v : iou_per_class(cm)) {
    if (std::isnan(v)) continue;
    sum += v;
    ++n;
  }
  if (n == 0) throw MetricError("mIoU undefined: no class present in prediction or truth");
  return sum / static_cast<double>(n);
}

double dice(const ConfusionMatrix& cm, std::size_t cls) {
  if (cls >= cm.classes) throw MetricError("class " + std::to_string(cls) + " out of range");
  const ClassCounts k = counts_for(cm, cls);
  const double denom = 2 * k.tp + k.fp + k.fn;
  return denom > 0 ? 2 * k.tp / denom : 1.0;
}

double accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw MetricError("accuracy undefined on an empty confusion matrix");
  std::uint64_t hit = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) hit += cm.at(c, c);
  return static_cast<double>(hit) / static_cast<double>(total);
}

double ntm_frobenius_error(const ad::Array& estimate, const ad::Array& reference) {
  if (!estimate.same_shape(reference))
    throw MetricError("transition matrices differ in shape: " + ad::shape_string(estimate.shape()) +
                      " vs " + ad::shape_string(reference.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    const double d = estimate[i] - reference[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double pseudo_noise_rate(std::span<const int> pseudo, std::span<const int> truth) {
  if (pseudo.size() != truth.size()) throw MetricError("pseudo labels and truth differ in size");
  if (pseudo.empty()) throw MetricError("noise rate undefined on zero pixels");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pseudo.size(); ++i) wrong += pseudo[i] != truth[i];
  return static_cast<double>(wrong) / static_cast<double>(pseudo.size());
}

const std::vector<int>& TruthAccess::labels(const data::QuarantinedLabels& truth, std::size_t image) {
  return truth.maps_.at(image);
}

std::vector<std::vector<int>> TruthAccess::noisy_labels(const data::QuarantinedLabels& truth,
                                                        const data::NoiseSpec& spec) {
  std::vector<std::vector<int>> out;
  out.reserve(truth.maps_.size());
  for (std::size_t i = 0; i < truth.maps_.size(); ++i)
    out.push_back(data::inject_label_noise(truth.maps_[i], spec, i));
  return out;
}

std::vector<std::vector<int>> predict_target(const ad::ParamSet& w, const data::Dataset& dataset) {
  const auto& c = dataset.config;
  std::vector<std::size_t> idx(dataset.target.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto probs = models::forward_seg(data::stack_pixels(dataset.target, idx),
                                         {idx.size(), c.height, c.width}, w);
  const std::vector<int> flat = models::argmax_rows(probs.first);
  std::vector<std::vector<int>> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    out[i].assign(flat.begin() + static_cast<long>(i * c.pixels()),
                  flat.begin() + static_cast<long>((i + 1) * c.pixels()));
  return out;
}

TargetScore score_target(const ad::ParamSet& w, const data::Dataset& dataset) {
  const auto pred = predict_target(w, dataset);
  TargetScore s{ConfusionMatrix(dataset.config.classes)};
  for (std::size_t i = 0; i < pred.size(); ++i)
    s.cm.merge(confusion(pred[i], TruthAccess::labels(dataset.target_truth, i), dataset.config.classes));
  s.miou = miou(s.cm);
  s.accuracy = accuracy(s.cm);
  return s;
}

double pseudo_noise_rate(const std::vector<std::vector<int>>& pseudo,
                         const data::QuarantinedLabels& truth) {
  if (pseudo.size() != truth.size()) throw MetricError("pseudo label maps and truth differ in count");
  std::size_t wrong = 0, total = 0;
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    const auto& t = TruthAccess::labels(truth, i);
    if (t.size() != pseudo[i].size()) throw MetricError("pseudo label map size mismatch");
    for (std::size_t p = 0; p < t.size(); ++p) wrong += pseudo[i][p] != t[p];
    total += t.size();
  }
  if (total == 0) throw MetricError("noise rate undefined on zero pixels");
  return static_cast<double>(wrong) / static_cast<double>(total);
}

}  // namespace metacorr::eval
