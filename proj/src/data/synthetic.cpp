#include "metacorr/data/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>

#include <json.hpp>

#include "metacorr/rng.hpp"

namespace metacorr::data {

namespace {

constexpr double kLo = 0.15, kMid = 0.5, kHi = 0.85;

// Spread-out grid points first: corners, then face and edge midpoints.
constexpr std::array<std::array<double, 3>, 16> kPrototypes = {{
    {kHi, kLo, kLo},  {kLo, kHi, kLo},  {kLo, kLo, kHi},  {kHi, kHi, kLo},
    {kLo, kHi, kHi},  {kHi, kLo, kHi},  {kLo, kLo, kLo},  {kHi, kHi, kHi},
    {kMid, kMid, kMid}, {kMid, kLo, kLo}, {kLo, kMid, kLo}, {kLo, kLo, kMid},
    {kMid, kHi, kHi}, {kHi, kMid, kHi}, {kHi, kHi, kMid}, {kMid, kMid, kLo},
}};

// Full-magnitude shift mixes each color toward its channel rotation
// (r, g, b) -> (b, r, g) and adds a small offset.
constexpr double kRotationMix = 0.7;
constexpr std::array<double, 3> kOffset = {0.05, -0.05, 0.05};
constexpr double kInvariantScale = 0.1;
constexpr std::size_t kLayoutAttempts = 100;

CounterRng stream(const DatasetConfig& config, std::string_view purpose, std::size_t index) {
  return CounterRng(config.seed).split(purpose).split(index);
}

void write_bytes(const std::filesystem::path& file, const void* data, std::size_t bytes) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + file.string() + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw DataError("failed writing " + file.string());
}

template <typename T>
std::vector<T> read_array(const std::filesystem::path& file, std::size_t count) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open " + file.string());
  std::vector<T> out(count);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (!in || in.peek() != std::char_traits<char>::eof()) {
    throw DataError(file.string() + " does not hold exactly " + std::to_string(count) +
                    " elements");
  }
  return out;
}

}  // namespace

void DatasetConfig::validate() const {
  if (height < 4 || width < 4) throw DataError("H and W must be >= 4");
  if (classes < 2 || classes > 16) throw DataError("class count must be in [2, 16]");
  if (images_per_domain == 0) throw DataError("images_per_domain must be positive");
  if (!(sigma_source >= 0.0)) throw DataError("sigma_source must be >= 0");
  if (!(shift_strength >= 0.0 && shift_strength <= 1.0))
    throw DataError("shift_strength must be in [0, 1]");
  if (!(invariant_fraction >= 0.0 && invariant_fraction <= 1.0))
    throw DataError("invariant_fraction must be in [0, 1]");
}

void NoiseSpec::validate() const {
  if (transition.rank() != 2 || transition.rows() != transition.cols())
    throw DataError("noise transition matrix must be square");
  for (std::size_t r = 0; r < transition.rows(); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < transition.cols(); ++c) {
      const double v = transition.at(r, c);
      if (!(v >= 0.0 && v <= 1.0))
        throw DataError("noise transition entry outside [0, 1] in row " + std::to_string(r));
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw DataError("noise transition row " + std::to_string(r) + " sums to " +
                      std::to_string(total));
  }
}

std::array<double, 3> prototype_color(std::size_t cls) { return kPrototypes.at(cls); }

std::array<double, 3> shift_color(const std::array<double, 3>& c, double magnitude) {
  const double mix = kRotationMix * magnitude;
  const std::array<double, 3> rotated = {c[2], c[0], c[1]};
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i)
    out[i] = c[i] + mix * (rotated[i] - c[i]) + magnitude * kOffset[i];
  return out;
}

std::vector<int> generate_layout(const DatasetConfig& config, std::size_t image_index) {
  const std::size_t h = config.height, w = config.width, k = config.classes;
  std::vector<int> labels(h * w, 0);
  if (k <= 1) return labels;
  CounterRng rng = stream(config, "layout", image_index);
  const std::size_t sites = 2 * k;
  std::vector<std::size_t> counts(k);
  for (std::size_t attempt = 0; attempt < kLayoutAttempts; ++attempt) {
    std::vector<std::array<double, 2>> site(sites);
    for (auto& s : site) s = {rng.uniform(0.0, static_cast<double>(h)), rng.uniform(0.0, static_cast<double>(w))};
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t owner = 0;
        for (std::size_t s = 0; s < sites; ++s) {
          const double dy = static_cast<double>(y) + 0.5 - site[s][0];
          const double dx = static_cast<double>(x) + 0.5 - site[s][1];
          const double d = dy * dy + dx * dx;
          if (d < best) {
            best = d;
            owner = s;
          }
        }
        const int cls = static_cast<int>(owner / 2);
        labels[y * w + x] = cls;
        ++counts[static_cast<std::size_t>(cls)];
      }
    if (std::all_of(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }))
      return labels;
  }
  // Forced fallback: give each missing class one pixel taken from a class
  // that can spare it.
  for (std::size_t cls = 0; cls < k; ++cls) {
    if (counts[cls] > 0) continue;
    for (;;) {
      const std::size_t p = rng.below(h * w);
      const auto owner = static_cast<std::size_t>(labels[p]);
      if (counts[owner] > 1) {
        --counts[owner];
        labels[p] = static_cast<int>(cls);
        ++counts[cls];
        break;
      }
    }
  }
  return labels;
}

LabeledImage render(const std::vector<int>& labels, Domain domain, const DatasetConfig& config,
                    std::size_t image_index) {
  const std::size_t n = config.height * config.width;
  if (labels.size() != n) throw DataError("label map does not match H x W");
  LabeledImage img;
  img.height = config.height;
  img.width = config.width;
  img.domain = domain;
  img.labels = labels;
  img.pixels.resize(n * 3);
  if (domain == Domain::kSource) img.invariant.assign(n, 0);

  CounterRng noise = stream(config, "render", image_index);
  CounterRng mask = stream(config, "invariant", image_index);
  for (std::size_t p = 0; p < n; ++p) {
    const int cls = labels[p];
    if (cls < 0 || static_cast<std::size_t>(cls) >= config.classes)
      throw DataError("label " + std::to_string(cls) + " out of range");
    double magnitude = 0.0;
    if (domain == Domain::kTarget) {
      magnitude = config.shift_strength;
    } else if (mask.uniform() < config.invariant_fraction) {
      img.invariant[p] = 1;
      magnitude = kInvariantScale * config.shift_strength;
    }
    const auto color = shift_color(prototype_color(static_cast<std::size_t>(cls)), magnitude);
    for (int c = 0; c < 3; ++c) {
      const double v = color[static_cast<std::size_t>(c)] + config.sigma_source * noise.normal();
      img.pixels[p * 3 + static_cast<std::size_t>(c)] = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

std::vector<int> inject_label_noise(const std::vector<int>& labels, const NoiseSpec& spec,
                                    std::uint64_t stream_id) {
  spec.validate();
  const std::size_t k = spec.transition.rows();
  CounterRng rng = CounterRng(spec.seed).split("label_noise").split(stream_id);
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int j = labels[i];
    if (j < 0 || static_cast<std::size_t>(j) >= k)
      throw DataError("label " + std::to_string(j) + " outside the noise matrix");
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t pick = static_cast<std::size_t>(j);
    for (std::size_t c = 0; c < k; ++c) {
      acc += spec.transition.at(static_cast<std::size_t>(j), c);
      if (u < acc) {
        pick = c;
        break;
      }
    }
    out[i] = static_cast<int>(pick);
  }
  return out;
}

Dataset generate_dataset(const DatasetConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  const std::size_t n = config.images_per_domain;
  std::vector<std::vector<int>> truth;
  for (std::size_t i = 0; i < n; ++i)
    ds.source.push_back(render(generate_layout(config, i), Domain::kSource, config, i));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t index = n + i;
    LabeledImage img = render(generate_layout(config, index), Domain::kTarget, config, index);
    ds.target.push_back({img.height, img.width, std::move(img.pixels)});
    truth.push_back(std::move(img.labels));
  }
  ds.target_truth = QuarantinedLabels(std::move(truth));
  return ds;
}

void QuarantinedLabels::write(const std::filesystem::path& file) const {
  std::vector<std::int32_t> flat;
  for (const auto& m : maps_) flat.insert(flat.end(), m.begin(), m.end());
  write_bytes(file, flat.data(), flat.size() * sizeof(std::int32_t));
}

QuarantinedLabels QuarantinedLabels::read(const std::filesystem::path& file, std::size_t images,
                                          std::size_t pixels) {
  const auto flat = read_array<std::int32_t>(file, images * pixels);
  std::vector<std::vector<int>> maps(images);
  for (std::size_t i = 0; i < images; ++i)
    maps[i].assign(flat.begin() + static_cast<long>(i * pixels),
                   flat.begin() + static_cast<long>((i + 1) * pixels));
  return QuarantinedLabels(std::move(maps));
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  const DatasetConfig& c = ds.config;

  std::vector<double> src_px, tgt_px;
  std::vector<std::int32_t> src_labels;
  std::vector<std::uint8_t> src_invariant;
  for (const auto& img : ds.source) {
    src_px.insert(src_px.end(), img.pixels.begin(), img.pixels.end());
    src_labels.insert(src_labels.end(), img.labels.begin(), img.labels.end());
    src_invariant.insert(src_invariant.end(), img.invariant.begin(), img.invariant.end());
  }
  for (const auto& img : ds.target) tgt_px.insert(tgt_px.end(), img.pixels.begin(), img.pixels.end());

  write_bytes(dir / "source_pixels.f64", src_px.data(), src_px.size() * sizeof(double));
  write_bytes(dir / "source_labels.i32", src_labels.data(), src_labels.size() * sizeof(std::int32_t));
  write_bytes(dir / "source_invariant.u8", src_invariant.data(), src_invariant.size());
  write_bytes(dir / "target_pixels.f64", tgt_px.data(), tgt_px.size() * sizeof(double));
  ds.target_truth.write(dir / "target_labels.i32");

  nlohmann::ordered_json m;
  m["format"] = "metacorr-dataset-v1";
  m["height"] = c.height;
  m["width"] = c.width;
  m["classes"] = c.classes;
  m["images_per_domain"] = c.images_per_domain;
  m["sigma_source"] = c.sigma_source;
  m["shift_strength"] = c.shift_strength;
  m["invariant_fraction"] = c.invariant_fraction;
  m["seed"] = c.seed;
  m["arrays"] = {
      {"source_pixels.f64", {ds.source.size(), c.height, c.width, 3}},
      {"source_labels.i32", {ds.source.size(), c.height, c.width}},
      {"source_invariant.u8", {ds.source.size(), c.height, c.width}},
      {"target_pixels.f64", {ds.target.size(), c.height, c.width, 3}},
      {"target_labels.i32", {ds.target.size(), c.height, c.width}},
  };
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << m.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("no dataset manifest in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  Dataset ds;
  DatasetConfig& c = ds.config;
  c.height = m.at("height");
  c.width = m.at("width");
  c.classes = m.at("classes");
  c.images_per_domain = m.at("images_per_domain");
  c.sigma_source = m.at("sigma_source");
  c.shift_strength = m.at("shift_strength");
  c.invariant_fraction = m.at("invariant_fraction");
  c.seed = m.at("seed");
  c.validate();

  const std::size_t n = c.images_per_domain, px = c.pixels();
  const auto src_px = read_array<double>(dir / "source_pixels.f64", n * px * 3);
  const auto src_labels = read_array<std::int32_t>(dir / "source_labels.i32", n * px);
  const auto src_inv = read_array<std::uint8_t>(dir / "source_invariant.u8", n * px);
  const auto tgt_px = read_array<double>(dir / "target_pixels.f64", n * px * 3);
  for (std::size_t i = 0; i < n; ++i) {
    LabeledImage img;
    img.height = c.height;
    img.width = c.width;
    img.domain = Domain::kSource;
    img.pixels.assign(src_px.begin() + static_cast<long>(i * px * 3), src_px.begin() + static_cast<long>((i + 1) * px * 3));
    img.labels.assign(src_labels.begin() + static_cast<long>(i * px), src_labels.begin() + static_cast<long>((i + 1) * px));
    img.invariant.assign(src_inv.begin() + static_cast<long>(i * px), src_inv.begin() + static_cast<long>((i + 1) * px));
    for (int l : img.labels)
      if (l < 0 || static_cast<std::size_t>(l) >= c.classes) throw DataError("stored label out of range");
    ds.source.push_back(std::move(img));
    ds.target.push_back({c.height, c.width,
                         std::vector<double>(tgt_px.begin() + static_cast<long>(i * px * 3),
                                             tgt_px.begin() + static_cast<long>((i + 1) * px * 3))});
  }
  ds.target_truth = QuarantinedLabels::read(dir / "target_labels.i32", n, px);
  return ds;
}

namespace {

template <typename Image>
ad::Array stack(std::span<const Image> images, std::span<const std::size_t> which) {
  if (which.empty()) throw DataError("empty image batch");
  const std::size_t px = images[which[0]].height * images[which[0]].width;
  ad::Array out({which.size() * px, 3});
  for (std::size_t b = 0; b < which.size(); ++b) {
    const auto& img = images[which[b]];
    if (img.height * img.width != px) throw DataError("mixed image sizes in a batch");
    std::copy(img.pixels.begin(), img.pixels.end(), out.data().begin() + static_cast<long>(b * px * 3));
  }
  return out;
}

}  // namespace

ad::Array stack_pixels(std::span<const LabeledImage> images, std::span<const std::size_t> which) {
  return stack(images, which);
}

ad::Array stack_pixels(std::span<const TargetImage> images, std::span<const std::size_t> which) {
  return stack(images, which);
}

}  // namespace metacorr::data
