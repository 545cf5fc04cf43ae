#include "metacorr/meta/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "metacorr/eval/metrics.hpp"
#include "metacorr/ntm/transition.hpp"
#include "metacorr/rng.hpp"

namespace metacorr::meta {

namespace {

const char* const kLevelNames[kLevels] = {"ntm.T0", "ntm.T1"};

std::uint64_t checksum_of(const Transitions& T) {
  ad::ParamSet p;
  for (std::size_t l = 0; l < kLevels; ++l) p.add(kLevelNames[l], T[l]);
  return p.checksum();
}

ad::Var level_output(const models::SegOutputs& out, std::size_t level) {
  return level == 0 ? out.deep : out.shallow;
}

std::vector<ad::Var> vars_in_order(const models::VarMap& vars, const ad::ParamSet& w) {
  std::vector<ad::Var> out;
  for (const auto& entry : w) out.push_back(vars.at(entry.first));
  return out;
}

}  // namespace

void OptimizerConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be > 0");
  };
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be >= 0");
  };
  // Zero learning rates are allowed for the reduction experiments (gamma_m = 0
  // turns the meta step off); negative ones never are.
  non_negative(virtual_lr, "virtual_lr");
  non_negative(meta_lr, "meta_lr");
  positive(actual_lr, "actual_lr");
  non_negative(weight_decay, "weight_decay");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  for (double a : alpha) non_negative(a, "alpha");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must be in [0, 1]");
  if (!(confidence_threshold >= 0.0 && confidence_threshold <= 1.0))
    throw ConfigError("confidence_threshold must be in [0, 1]");
  if (meta_batch_pixels == 0) throw ConfigError("meta_batch_pixels must be > 0");
  if (batch_images == 0) throw ConfigError("batch_images must be > 0");
  if (eval_every == 0) throw ConfigError("eval_every must be > 0");
}

std::string_view method_name(Method m) {
  switch (m) {
    case Method::kSourceOnly: return "source_only";
    case Method::kSelfTraining: return "self_training";
    case Method::kThresholdSelfTraining: return "threshold_self_training";
    case Method::kSingleDmlc: return "single_dmlc";
    case Method::kMetaCorrection: return "metacorrection";
  }
  return "?";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods{Method::kSourceOnly, Method::kSelfTraining,
                                           Method::kThresholdSelfTraining, Method::kSingleDmlc,
                                           Method::kMetaCorrection};
  return methods;
}

Method parse_method(std::string_view name) {
  std::string valid;
  for (Method m : all_methods()) {
    if (method_name(m) == name) return m;
    valid += (valid.empty() ? "" : ", ") + std::string(method_name(m));
  }
  throw ConfigError("unknown method '" + std::string(name) + "'; valid methods: " + valid);
}

// ---- pseudo labels ----------------------------------------------------------

PseudoLabelMap generate_pseudo_labels(const ad::ParamSet& w,
                                      std::span<const data::TargetImage> target,
                                      std::size_t iteration) {
  PseudoLabelMap out;
  out.generated_at = iteration;
  if (target.empty()) return out;
  std::vector<std::size_t> idx(target.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t px = target.front().height * target.front().width;
  const auto probs = models::forward_seg(data::stack_pixels(target, idx),
                                         {idx.size(), target.front().height, target.front().width}, w);
  const ad::Array& deep = probs.first;
  const std::vector<int> labels = models::argmax_rows(deep);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.maps.emplace_back(labels.begin() + static_cast<long>(i * px),
                          labels.begin() + static_cast<long>((i + 1) * px));
    std::vector<double> conf(px);
    for (std::size_t p = 0; p < px; ++p) {
      const std::size_t row = i * px + p;
      conf[p] = deep.at(row, static_cast<std::size_t>(labels[row]));
    }
    out.confidence.push_back(std::move(conf));
  }
  return out;
}

// ---- meta set ---------------------------------------------------------------

std::size_t MetaSet::fallback_count() const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [](const MetaEntry& e) { return e.fallback; }));
}

double MetaSet::invariant_precision(std::span<const data::LabeledImage> source) const {
  if (entries.empty()) return 0.0;
  double hits = 0.0;
  for (const MetaEntry& e : entries) {
    const auto& img = source[e.site.image];
    hits += img.invariant[e.site.y * img.width + e.site.x] != 0;
  }
  return hits / static_cast<double>(entries.size());
}

MetaSet select_meta_set(const ad::ParamSet& u, std::span<const data::LabeledImage> source,
                        double tau, std::size_t minimum) {
  if (source.empty()) throw std::invalid_argument("meta set selection needs source images");
  const std::size_t h = source.front().height, w = source.front().width, px = h * w;
  std::vector<std::size_t> idx(source.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const ad::Array scores = models::forward_domain(data::stack_pixels(source, idx), {idx.size(), h, w}, u);

  auto entry_at = [&](std::size_t row, bool fallback) {
    const std::size_t image = row / px, p = row % px;
    return MetaEntry{{image, p / w, p % w}, source[image].labels[p], scores[row], fallback};
  };
  MetaSet set;
  for (std::size_t row = 0; row < scores.size(); ++row)
    if (scores[row] > tau) set.entries.push_back(entry_at(row, false));
  if (set.entries.size() >= minimum) return set;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto keep = static_cast<std::size_t>(std::ceil(kFallbackQuantile * static_cast<double>(scores.size())));
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
                    });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  set.entries.clear();
  set.fallback = true;
  for (std::size_t row : order) set.entries.push_back(entry_at(row, !(scores[row] > tau)));
  return set;
}

MetaBatch make_meta_batch(std::span<const data::LabeledImage> source,
                          std::span<const MetaEntry> entries) {
  std::vector<models::PixelSite> sites;
  auto labels = std::make_shared<std::vector<int>>();
  for (const MetaEntry& e : entries) {
    sites.push_back(e.site);
    labels->push_back(e.label);
  }
  return {models::gather_sites(source, sites), labels};
}

// ---- virtual / meta / actual ------------------------------------------------

VirtualRecord virtual_step(const ad::ParamSet& w, const TargetBatch& batch, const Transitions& T,
                           const std::array<double, kLevels>& alpha, double virtual_lr) {
  VirtualRecord r;
  r.graph_ = std::make_unique<ad::Graph>();
  ad::Graph& g = *r.graph_;
  const models::VarMap vars = g.bind(w);
  std::array<ad::Var, kLevels> tv;
  for (std::size_t l = 0; l < kLevels; ++l) tv[l] = g.param(kLevelNames[l], T[l]);
  const models::SegOutputs out =
      models::build_segmentation(g, vars, g.constant(batch.pixels, "target_pixels"), batch.geometry);
  std::optional<ad::Var> loss;
  for (std::size_t l = 0; l < kLevels; ++l) {
    if (alpha[l] == 0.0) continue;
    ad::Var term = ad::scale(ntm::corrected_loss(level_output(out, l), batch.labels, tv[l]), alpha[l]);
    loss = loss ? *loss + term : term;
    r.levels_.push_back(kLevelNames[l]);
  }
  r.w_hat_ = w;
  if (loss) {
    r.loss_ = loss->value().item();
    const std::vector<ad::Var> wv = vars_in_order(vars, w);
    r.first_ = g.grad(*loss, wv);
    std::size_t i = 0;
    for (const auto& [name, value] : w) {
      ad::Array& target = r.w_hat_.mutable_at(name);
      const ad::Array& grad = r.first_[i++].value();
      for (std::size_t k = 0; k < target.size(); ++k) target[k] = value[k] - virtual_lr * grad[k];
    }
  }
  r.virtual_lr_ = virtual_lr;
  r.w_checksum_ = w.checksum();
  r.t_checksum_ = checksum_of(T);
  return r;
}

MetaGradient meta_gradient(const ad::ParamSet& w, VirtualRecord& record, const MetaBatch& batch,
                           const Transitions& T) {
  if (!record.graph_ || record.consumed_)
    throw StaleRecordError("meta step needs a fresh virtual record; this one was already used");
  if (record.w_checksum_ != w.checksum() || record.t_checksum_ != checksum_of(T))
    throw StaleRecordError("weights or transition matrices changed since the virtual step");
  record.consumed_ = true;

  ad::Graph h;
  const models::SegOutputs out = models::build_segmentation_sites(h, h.bind(record.w_hat_), batch.windows);
  ad::Var meta_loss = models::cross_entropy(out.deep, batch.labels);
  const ad::ParamSet v = h.gradient(meta_loss);

  MetaGradient result;
  result.meta_loss = meta_loss.value().item();
  for (std::size_t l = 0; l < kLevels; ++l) result.grad[l] = ad::Array::zeros_like(T[l]);
  if (!record.levels_.empty()) {
    const ad::ParamSet mixed = ad::mixed_second_gradient(record.first_, v, record.levels_);
    for (std::size_t l = 0; l < kLevels; ++l) {
      if (!mixed.contains(kLevelNames[l])) continue;
      const ad::Array& m = mixed.at(kLevelNames[l]);
      for (std::size_t k = 0; k < m.size(); ++k) result.grad[l][k] = -record.virtual_lr_ * m[k];
    }
  }
  record.graph_.reset();
  record.first_.clear();
  return result;
}

MetaStepResult meta_step(const ad::ParamSet& w, VirtualRecord& record, const MetaBatch& batch,
                         Transitions& T, double meta_lr) {
  const MetaGradient mg = meta_gradient(w, record, batch, T);
  MetaStepResult r{mg.meta_loss, 0};
  for (std::size_t l = 0; l < kLevels; ++l) {
    ad::Array stepped = T[l];
    for (std::size_t k = 0; k < stepped.size(); ++k) stepped[k] -= meta_lr * mg.grad[l][k];
    T[l] = ntm::project_row_stochastic(stepped, &r.projection_fallbacks);
  }
  return r;
}

namespace {

struct ObjectiveParts {
  ad::Var total;
  double source = 0.0;
  double target = 0.0;
  std::size_t floored = 0;
};

ObjectiveParts build_objective(ad::Graph& g, const models::VarMap& vars, const ActualStepInput& in) {
  if (!in.source) throw std::invalid_argument("actual step needs a source batch");
  const models::SegOutputs src =
      models::build_segmentation(g, vars, g.constant(in.source->pixels, "source_pixels"), in.source->geometry);
  ObjectiveParts parts;
  parts.total = models::cross_entropy(src.deep, in.source->labels);
  parts.source = parts.total.value().item();
  if (in.objective == TargetObjective::kNone) return parts;
  if (!in.target) throw std::invalid_argument("target objective without a target batch");

  const models::SegOutputs tgt =
      models::build_segmentation(g, vars, g.constant(in.target->pixels, "target_pixels"), in.target->geometry);
  std::optional<ad::Var> term;
  switch (in.objective) {
    case TargetObjective::kPlain:
      term = ad::scale(models::cross_entropy(tgt.deep, in.target->labels), in.alpha[0]);
      break;
    case TargetObjective::kMasked:
      if (!in.mask) throw std::invalid_argument("masked objective without a mask");
      term = ad::scale(models::masked_cross_entropy(tgt.deep, in.target->labels, *in.mask), in.alpha[0]);
      break;
    case TargetObjective::kCorrected: {
      if (!in.T) throw std::invalid_argument("corrected objective without transition matrices");
      ntm::LossDiagnostics diag;
      for (std::size_t l = 0; l < kLevels; ++l) {
        if (in.alpha[l] == 0.0) continue;
        ad::Var t = g.constant((*in.T)[l], kLevelNames[l]);
        ad::Var level =
            ad::scale(ntm::corrected_loss(level_output(tgt, l), in.target->labels, t, &diag), in.alpha[l]);
        term = term ? *term + level : level;
      }
      parts.floored = diag.floored;
      break;
    }
    case TargetObjective::kNone:
      break;
  }
  if (term) {
    parts.target = term->value().item();
    parts.total = parts.total + *term;
  }
  return parts;
}

}  // namespace

ActualStepLosses actual_step(ad::ParamSet& w, ad::ParamSet& velocity, const ActualStepInput& in,
                             const OptimizerConfig& config) {
  ad::Graph g;
  const ObjectiveParts parts = build_objective(g, g.bind(w), in);
  const ad::ParamSet grads = g.gradient(parts.total);
  for (const auto& [name, grad] : grads) {
    ad::Array& p = w.mutable_at(name);
    ad::Array& v = velocity.mutable_at(name);
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = config.momentum * v[k] + (grad[k] + config.weight_decay * p[k]);
      p[k] -= config.actual_lr * v[k];
    }
  }
  return {parts.source, parts.target, parts.floored};
}

double actual_objective(const ad::ParamSet& w, const ActualStepInput& in) {
  ad::Graph g;
  return build_objective(g, g.bind(w), in).total.value().item();
}

// ---- training loop ----------------------------------------------------------

namespace {

template <typename Image>
ImageBatch image_batch(std::span<const Image> images, const std::vector<std::size_t>& idx,
                       const std::vector<std::vector<int>>& label_maps) {
  ImageBatch b;
  b.pixels = data::stack_pixels(images, idx);
  b.geometry = {idx.size(), images.front().height, images.front().width};
  auto labels = std::make_shared<std::vector<int>>();
  for (std::size_t i : idx) labels->insert(labels->end(), label_maps[i].begin(), label_maps[i].end());
  b.labels = labels;
  return b;
}

std::vector<std::vector<int>> source_label_maps(std::span<const data::LabeledImage> source) {
  std::vector<std::vector<int>> maps;
  for (const auto& img : source) maps.push_back(img.labels);
  return maps;
}

ad::Array confidence_mask(const PseudoLabelMap& pseudo, const std::vector<std::size_t>& idx,
                          double threshold) {
  std::size_t n = 0;
  for (std::size_t i : idx) n += pseudo.confidence[i].size();
  ad::Array mask({n, 1});
  std::size_t row = 0;
  for (std::size_t i : idx)
    for (double c : pseudo.confidence[i]) mask[row++] = c >= threshold ? 1.0 : 0.0;
  return mask;
}

TrainResult run(Method method, const OptimizerConfig& config, const TrainInputs& in) {
  config.validate();
  if (!in.dataset || !in.w0 || !in.u0) throw ConfigError("training needs a dataset, w0 and u0");
  const data::Dataset& ds = *in.dataset;
  const bool uses_target = method != Method::kSourceOnly;
  const bool uses_meta = method == Method::kSingleDmlc || method == Method::kMetaCorrection;
  if (uses_target && !in.pseudo) throw ConfigError(std::string(method_name(method)) + " needs pseudo labels");
  if (uses_target && ds.target.empty()) throw ConfigError("target-domain methods need target images");
  if (ds.source.empty()) throw ConfigError("training needs source images");

  std::array<double, kLevels> alpha = config.alpha;
  if (method == Method::kSingleDmlc) alpha[1] = 0.0;

  TrainResult result;
  result.w = *in.w0;
  const std::size_t classes = models::classes_of(result.w);
  for (auto& t : result.T) t = ntm::identity_init(classes);
  result.meta_set = select_meta_set(*in.u0, ds.source, config.tau, config.meta_batch_pixels);
  const MetaBatch meta_eval = make_meta_batch(ds.source, result.meta_set.entries);
  const auto source_maps = source_label_maps(ds.source);
  PseudoLabelMap pseudo = in.pseudo ? *in.pseudo : PseudoLabelMap{};

  const CounterRng root = CounterRng(config.seed).split("train");
  CounterRng source_rng = root.split("source_batches");
  CounterRng target_rng = root.split("target_batches");
  CounterRng meta_rng = root.split("meta_batches");
  ad::ParamSet velocity = result.w.zeros_like();

  double sum_source = 0.0, sum_target = 0.0;
  std::size_t window = 0;
  for (std::size_t it = 0; it < config.steps; ++it) {
    if (uses_target && config.pseudo_refresh_every > 0 && it > 0 && it % config.pseudo_refresh_every == 0)
      pseudo = generate_pseudo_labels(result.w, ds.target, it);

    const auto s_idx = models::sample_indices(source_rng, ds.source.size(), config.batch_images);
    const SourceBatch source_batch = image_batch(std::span(ds.source), s_idx, source_maps);
    ActualStepInput step{&source_batch};
    TargetBatch target_batch;
    ad::Array mask;
    if (uses_target) {
      const auto t_idx = models::sample_indices(target_rng, ds.target.size(), config.batch_images);
      target_batch = image_batch(std::span(ds.target), t_idx, pseudo.maps);
      step.target = &target_batch;
      step.alpha = alpha;
      switch (method) {
        case Method::kSelfTraining: step.objective = TargetObjective::kPlain; break;
        case Method::kThresholdSelfTraining:
          mask = confidence_mask(pseudo, t_idx, config.confidence_threshold);
          step.mask = &mask;
          step.objective = TargetObjective::kMasked;
          break;
        default: step.objective = TargetObjective::kCorrected; step.T = &result.T; break;
      }
    }
    if (uses_meta) {
      const auto m_idx = models::sample_indices(meta_rng, result.meta_set.entries.size(), config.meta_batch_pixels);
      std::vector<MetaEntry> chosen;
      for (std::size_t i : m_idx) chosen.push_back(result.meta_set.entries[i]);
      VirtualRecord record = virtual_step(result.w, target_batch, result.T, alpha, config.virtual_lr);
      const MetaStepResult ms =
          meta_step(result.w, record, make_meta_batch(ds.source, chosen), result.T, config.meta_lr);
      result.diagnostics.projection_fallbacks += ms.projection_fallbacks;
    }
    const ActualStepLosses losses = actual_step(result.w, velocity, step, config);
    result.diagnostics.log_floor_hits += losses.floored;
    sum_source += losses.source;
    sum_target += losses.target;
    ++window;

    if ((it + 1) % config.eval_every == 0) {
      HistoryRow row;
      row.iteration = it + 1;
      row.loss_source = sum_source / static_cast<double>(window);
      row.loss_target_corrected = sum_target / static_cast<double>(window);
      {
        ad::Graph g;
        const auto out = models::build_segmentation_sites(g, g.bind(result.w), meta_eval.windows);
        row.meta_loss = models::cross_entropy(out.deep, meta_eval.labels).value().item();
      }
      if (!ds.target.empty()) {
        row.miou_target = eval::score_target(result.w, ds).miou;
        if (!pseudo.maps.empty()) row.pseudo_noise_rate = eval::pseudo_noise_rate(pseudo.maps, ds.target_truth);
      }
      const ad::Array I = ntm::identity_init(classes);
      row.ntm_frob_t0 = eval::ntm_frobenius_error(result.T[0], I);
      row.ntm_frob_t1 = eval::ntm_frobenius_error(result.T[1], I);
      row.fallback_count = result.meta_set.fallback_count();
      row.T = result.T;
      result.history.push_back(std::move(row));
      sum_source = sum_target = 0.0;
      window = 0;
    }
  }
  return result;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

TrainResult train_metacorrection(const OptimizerConfig& config, const TrainInputs& in) {
  return run(Method::kMetaCorrection, config, in);
}

TrainResult train_baseline(Method kind, const OptimizerConfig& config, const TrainInputs& in) {
  if (kind == Method::kMetaCorrection)
    throw ConfigError("metacorrection is not a baseline; use train_metacorrection");
  return run(kind, config, in);
}

TrainResult train(Method method, const OptimizerConfig& config, const TrainInputs& in) {
  return run(method, config, in);
}

std::string history_csv(const std::vector<HistoryRow>& history) {
  std::string out =
      "iteration,loss_source,loss_target_corrected,meta_loss,miou_target,pseudo_noise_rate,"
      "ntm_frob_T0_vs_identity,ntm_frob_T1_vs_identity,fallback_count\n";
  for (const HistoryRow& r : history) {
    out += std::to_string(r.iteration) + ',' + fmt(r.loss_source) + ',' + fmt(r.loss_target_corrected) + ',' +
           fmt(r.meta_loss) + ',' + fmt(r.miou_target) + ',' + fmt(r.pseudo_noise_rate) + ',' +
           fmt(r.ntm_frob_t0) + ',' + fmt(r.ntm_frob_t1) + ',' + std::to_string(r.fallback_count) + '\n';
  }
  return out;
}

std::string ntm_history_csv(const std::vector<HistoryRow>& history) {
  std::string out = "iteration,level,row";
  const std::size_t classes = history.empty() ? 0 : history.front().T[0].rows();
  for (std::size_t c = 0; c < classes; ++c) out += ",c" + std::to_string(c);
  out += '\n';
  for (const HistoryRow& r : history)
    for (std::size_t l = 0; l < kLevels; ++l)
      for (std::size_t j = 0; j < r.T[l].rows(); ++j) {
        out += std::to_string(r.iteration) + ',' + std::to_string(l) + ',' + std::to_string(j);
        for (std::size_t k = 0; k < r.T[l].cols(); ++k) out += ',' + fmt(r.T[l].at(j, k));
        out += '\n';
      }
  return out;
}

}  // namespace metacorr::meta
