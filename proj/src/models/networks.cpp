#include "metacorr/models/networks.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace metacorr::models {

namespace {

constexpr std::size_t kWindow = 27;  // 3x3 neighbourhood x 3 channels

ad::Array he_normal(CounterRng rng, std::size_t fan_in, std::size_t fan_out) {
  ad::Array a({fan_in, fan_out});
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = sd * rng.normal();
  return a;
}

ad::Var dense(const VarMap& p, const std::string& layer, ad::Var x) {
  const std::size_t rows = x.value().rows();
  return ad::matmul(x, p.at(layer + ".weight")) + ad::broadcast_rows(p.at(layer + ".bias"), rows);
}

// Momentum SGD on `params` driven by a per-step loss builder.
template <typename LossFn>
ad::ParamSet run_sgd(ad::ParamSet params, const PretrainConfig& config, LossFn&& loss_for_step) {
  ad::ParamSet velocity = params.zeros_like();
  for (std::size_t step = 0; step < config.steps; ++step) {
    ad::Graph g;
    VarMap vars = g.bind(params);
    ad::Var loss = loss_for_step(g, vars, step);
    const ad::ParamSet grads = g.gradient(loss);
    for (const auto& [name, grad] : grads) {
      ad::Array& v = velocity.mutable_at(name);
      ad::Array& w = params.mutable_at(name);
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = config.momentum * v[i] + grad[i];
        w[i] -= config.learning_rate * v[i];
      }
    }
  }
  return params;
}

}  // namespace

ad::ParamSet init_segmentation(const SegNetShape& shape, std::uint64_t seed) {
  if (shape.classes < 2) throw std::invalid_argument("segmentation net needs >= 2 classes");
  const CounterRng root = CounterRng(seed).split("init_segmentation");
  ad::ParamSet w;
  w.add("seg.layer1.weight", he_normal(root.split("layer1"), kWindow, shape.hidden1));
  w.add("seg.layer1.bias", ad::Array({1, shape.hidden1}));
  w.add("seg.layer2.weight", he_normal(root.split("layer2"), 9 * shape.hidden1, shape.hidden2));
  w.add("seg.layer2.bias", ad::Array({1, shape.hidden2}));
  w.add("seg.head_deep.weight", he_normal(root.split("head_deep"), shape.hidden2, shape.classes));
  w.add("seg.head_deep.bias", ad::Array({1, shape.classes}));
  w.add("seg.head_shallow.weight", he_normal(root.split("head_shallow"), shape.hidden1, shape.classes));
  w.add("seg.head_shallow.bias", ad::Array({1, shape.classes}));
  if (w.parameter_count() > kMaxSegmentationParams) {
    throw std::invalid_argument("segmentation net has " + std::to_string(w.parameter_count()) +
                                " parameters, limit is " +
                                std::to_string(kMaxSegmentationParams));
  }
  return w;
}

ad::ParamSet init_domain_predictor(std::uint64_t seed, std::size_t hidden) {
  const CounterRng root = CounterRng(seed).split("init_domain");
  ad::ParamSet u;
  u.add("dom.layer1.weight", he_normal(root.split("layer1"), kWindow, hidden));
  u.add("dom.layer1.bias", ad::Array({1, hidden}));
  u.add("dom.head.weight", he_normal(root.split("head"), hidden, 1));
  u.add("dom.head.bias", ad::Array({1, 1}));
  return u;
}

std::size_t classes_of(const ad::ParamSet& w) { return w.at("seg.head_deep.bias").cols(); }

SegOutputs build_segmentation(ad::Graph&, const VarMap& w, ad::Var pixels,
                              const ad::WindowGeometry& geometry) {
  ad::Var h1 = ad::leaky_relu(dense(w, "seg.layer1", ad::unfold3x3(pixels, geometry)), kLeakySlope);
  ad::Var h2 = ad::leaky_relu(dense(w, "seg.layer2", ad::unfold3x3(h1, geometry)), kLeakySlope);
  return {ad::softmax(dense(w, "seg.head_deep", h2)),
          ad::softmax(dense(w, "seg.head_shallow", h1))};
}

SiteWindows gather_sites(std::span<const data::LabeledImage> images,
                         std::span<const PixelSite> sites) {
  SiteWindows out;
  out.sites = sites.size();
  out.neighbour_windows = ad::Array({sites.size() * 9, kWindow});
  out.neighbour_valid = ad::Array({sites.size() * 9, 1});
  out.center_windows = ad::Array({sites.size(), kWindow});
  auto window_at = [&](const data::LabeledImage& img, long y, long x, double* dst) {
    for (int k = 0; k < 9; ++k) {
      const long yy = y + k / 3 - 1, xx = x + k % 3 - 1;
      if (yy < 0 || xx < 0 || yy >= static_cast<long>(img.height) || xx >= static_cast<long>(img.width))
        continue;
      const double* src = img.pixels.data() + (static_cast<std::size_t>(yy) * img.width + static_cast<std::size_t>(xx)) * 3;
      std::copy(src, src + 3, dst + k * 3);
    }
  };
  for (std::size_t s = 0; s < sites.size(); ++s) {
    const PixelSite& site = sites[s];
    const data::LabeledImage& img = images[site.image];
    const long y = static_cast<long>(site.y), x = static_cast<long>(site.x);
    window_at(img, y, x, out.center_windows.data().data() + s * kWindow);
    for (int k = 0; k < 9; ++k) {
      const long ny = y + k / 3 - 1, nx = x + k % 3 - 1;
      const std::size_t row = s * 9 + static_cast<std::size_t>(k);
      if (ny < 0 || nx < 0 || ny >= static_cast<long>(img.height) || nx >= static_cast<long>(img.width))
        continue;
      out.neighbour_valid[row] = 1.0;
      window_at(img, ny, nx, out.neighbour_windows.data().data() + row * kWindow);
    }
  }
  return out;
}

SegOutputs build_segmentation_sites(ad::Graph& g, const VarMap& w, const SiteWindows& sites) {
  const std::size_t hidden1 = w.at("seg.layer1.bias").value().cols();
  ad::Var valid = ad::broadcast_cols(g.constant(sites.neighbour_valid, "site_valid"), hidden1);
  ad::Var h1n = ad::leaky_relu(dense(w, "seg.layer1", g.constant(sites.neighbour_windows)), kLeakySlope) * valid;
  ad::Var h1c = ad::leaky_relu(dense(w, "seg.layer1", g.constant(sites.center_windows)), kLeakySlope);
  ad::Var h2 = ad::leaky_relu(dense(w, "seg.layer2", ad::reshape(h1n, {sites.sites, 9 * hidden1})), kLeakySlope);
  return {ad::softmax(dense(w, "seg.head_deep", h2)),
          ad::softmax(dense(w, "seg.head_shallow", h1c))};
}

ad::Var build_domain(ad::Graph&, const VarMap& u, ad::Var pixels,
                     const ad::WindowGeometry& geometry) {
  ad::Var h = ad::leaky_relu(dense(u, "dom.layer1", ad::unfold3x3(pixels, geometry)), kLeakySlope);
  return ad::sigmoid(dense(u, "dom.head", h));
}

std::pair<ad::Array, ad::Array> forward_seg(const ad::Array& pixels,
                                            const ad::WindowGeometry& geometry,
                                            const ad::ParamSet& w) {
  if (pixels.rank() != 2 || pixels.cols() != 3)
    throw ad::ShapeError("forward_seg expects an N x 3 pixel matrix, got " + ad::shape_string(pixels.shape()));
  ad::Graph g;
  SegOutputs out = build_segmentation(g, g.bind(w), g.constant(pixels, "pixels"), geometry);
  return {out.deep.value(), out.shallow.value()};
}

ad::Array forward_domain(const ad::Array& pixels, const ad::WindowGeometry& geometry,
                         const ad::ParamSet& u) {
  if (pixels.rank() != 2 || pixels.cols() != 3)
    throw ad::ShapeError("forward_domain expects an N x 3 pixel matrix, got " + ad::shape_string(pixels.shape()));
  ad::Graph g;
  return build_domain(g, g.bind(u), g.constant(pixels, "pixels"), geometry).value();
}

ad::Var cross_entropy(ad::Var probs, const Labels& labels) {
  const double n = static_cast<double>(labels->size());
  return ad::scale(ad::sum(ad::log(ad::gather(probs, labels), kLogFloor)), -1.0 / n);
}

ad::Var masked_cross_entropy(ad::Var probs, const Labels& labels, const ad::Array& mask) {
  double count = 0.0;
  for (double m : mask.data()) count += m != 0.0 ? 1.0 : 0.0;
  ad::Graph& g = *probs.graph();
  if (count == 0.0) return g.constant(ad::Array::scalar(0.0), "empty_mask_loss");
  ad::Var weights = g.constant(mask, "loss_mask");
  return ad::scale(ad::sum(ad::log(ad::gather(probs, labels), kLogFloor) * weights), -1.0 / count);
}

ad::Var binary_cross_entropy(ad::Var scores, const ad::Array& targets) {
  ad::Graph& g = *scores.graph();
  ad::Var t = g.constant(targets, "domain_targets");
  ad::Var not_t = g.constant([&] {
    ad::Array a = targets;
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = 1.0 - a[i];
    return a;
  }());
  ad::Var pos = ad::sum(t * ad::log(scores, kLogFloor));
  ad::Var neg = ad::sum(not_t * ad::log(ad::affine(scores, -1.0, 1.0), kLogFloor));
  return ad::scale(pos + neg, -1.0 / static_cast<double>(targets.size()));
}

std::vector<int> argmax_rows(const ad::Array& probs) {
  std::vector<int> out(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.cols(); ++c)
      if (probs.at(r, c) > probs.at(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::vector<std::size_t> sample_indices(CounterRng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
  all.resize(k);
  return all;
}

ad::ParamSet pretrain_source(const ad::ParamSet& w, std::span<const data::LabeledImage> source,
                             const PretrainConfig& config) {
  if (config.steps == 0) return w;
  if (source.empty()) throw std::invalid_argument("pretrain_source needs source images");
  CounterRng rng = CounterRng(config.seed).split("pretrain_source");
  const auto& first = source.front();
  return run_sgd(w, config, [&](ad::Graph& g, const VarMap& vars, std::size_t) {
    const auto batch = sample_indices(rng, source.size(), config.batch_images);
    auto labels = std::make_shared<std::vector<int>>();
    for (std::size_t i : batch) labels->insert(labels->end(), source[i].labels.begin(), source[i].labels.end());
    const ad::WindowGeometry geo{batch.size(), first.height, first.width};
    SegOutputs out = build_segmentation(g, vars, g.constant(data::stack_pixels(source, batch)), geo);
    return cross_entropy(out.deep, labels);
  });
}

ad::ParamSet pretrain_domain(const ad::ParamSet& u, std::span<const data::LabeledImage> source,
                             std::span<const data::TargetImage> target,
                             const PretrainConfig& config) {
  if (config.steps == 0) return u;
  if (source.empty() || target.empty())
    throw std::invalid_argument("pretrain_domain needs both domains");
  CounterRng rng = CounterRng(config.seed).split("pretrain_domain");
  const std::size_t h = source.front().height, wdt = source.front().width;
  return run_sgd(u, config, [&](ad::Graph& g, const VarMap& vars, std::size_t) {
    const auto s_batch = sample_indices(rng, source.size(), config.batch_images);
    const auto t_batch = sample_indices(rng, target.size(), config.batch_images);
    const ad::Array s_px = data::stack_pixels(source, s_batch);
    const ad::Array t_px = data::stack_pixels(target, t_batch);
    ad::Array pixels({s_px.rows() + t_px.rows(), 3});
    std::copy(s_px.data().begin(), s_px.data().end(), pixels.data().begin());
    std::copy(t_px.data().begin(), t_px.data().end(), pixels.data().begin() + static_cast<long>(s_px.size()));
    ad::Array targets({pixels.rows(), 1});
    for (std::size_t i = s_px.rows(); i < pixels.rows(); ++i) targets[i] = 1.0;
    const ad::WindowGeometry geo{s_batch.size() + t_batch.size(), h, wdt};
    return binary_cross_entropy(build_domain(g, vars, g.constant(pixels), geo), targets);
  });
}

void save_checkpoint(const ad::ParamSet& params, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::ordered_json manifest;
  manifest["format"] = "metacorr-params-v1";
  manifest["params"] = nlohmann::ordered_json::array();
  std::vector<double> flat;
  for (const auto& [name, a] : params) {
    manifest["params"].push_back({{"name", name}, {"shape", a.shape()}, {"offset", flat.size()}});
    flat.insert(flat.end(), a.data().begin(), a.data().end());
  }
  std::ofstream bin(dir / "params.f64", std::ios::binary | std::ios::trunc);
  bin.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
  std::ofstream js(dir / "manifest.json", std::ios::trunc);
  js << manifest.dump(2) << '\n';
  if (!bin || !js) throw std::runtime_error("failed writing checkpoint to " + dir.string());
}

ad::ParamSet load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream js(dir / "manifest.json");
  if (!js) throw std::runtime_error("no checkpoint manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(js);
  std::ifstream bin(dir / "params.f64", std::ios::binary);
  if (!bin) throw std::runtime_error("no params.f64 in " + dir.string());
  const auto bytes = static_cast<std::size_t>(std::filesystem::file_size(dir / "params.f64"));
  std::vector<double> values(bytes / sizeof(double));
  bin.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  ad::ParamSet out;
  for (const auto& entry : manifest.at("params")) {
    std::vector<std::size_t> shape = entry.at("shape");
    const std::size_t offset = entry.at("offset");
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;
    if (offset + count > values.size())
      throw std::runtime_error("checkpoint data truncated for " + entry.at("name").get<std::string>());
    out.add(entry.at("name"), ad::Array(shape, std::vector<double>(values.begin() + static_cast<long>(offset),
                                                                    values.begin() + static_cast<long>(offset + count))));
  }
  return out;
}

}  // namespace metacorr::models
