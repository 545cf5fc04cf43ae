#include "metacorr/experiment/experiment.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "metacorr/eval/metrics.hpp"
#include "metacorr/rng.hpp"

namespace metacorr::experiment {

namespace {

using nlohmann::json;

struct Field {
  std::string key;
  std::function<json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const json&)> set;
};

template <class T>
T as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0))
        throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("bad value for '" + key + "': " + v.dump());
  }
}

template <class T, class M>
Field field(std::string key, M member) {
  return {key, [member](const ExperimentConfig& c) { return json(member(const_cast<ExperimentConfig&>(c))); },
          [member, key](ExperimentConfig& c, const json& v) { member(c) = as<T>(v, key); }};
}

#define METACORR_FIELD(T, key, expr) field<T>(key, [](ExperimentConfig& c) -> T& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f{
        METACORR_FIELD(std::uint64_t, "seed", c.seed),
        METACORR_FIELD(std::string, "method", c.method),
        {"output_dir", [](const ExperimentConfig& c) { return json(c.output_dir.string()); },
         [](ExperimentConfig& c, const json& v) { c.output_dir = as<std::string>(v, "output_dir"); }},
        {"data_dir", [](const ExperimentConfig& c) { return json(c.data_dir.string()); },
         [](ExperimentConfig& c, const json& v) { c.data_dir = as<std::string>(v, "data_dir"); }},
        METACORR_FIELD(std::size_t, "data.height", c.data.height),
        METACORR_FIELD(std::size_t, "data.width", c.data.width),
        METACORR_FIELD(std::size_t, "data.classes", c.data.classes),
        METACORR_FIELD(std::size_t, "data.images_per_domain", c.data.images_per_domain),
        METACORR_FIELD(double, "data.sigma_source", c.data.sigma_source),
        METACORR_FIELD(double, "data.shift_strength", c.data.shift_strength),
        METACORR_FIELD(double, "data.invariant_fraction", c.data.invariant_fraction),
        METACORR_FIELD(std::size_t, "network.hidden1", c.network.hidden1),
        METACORR_FIELD(std::size_t, "network.hidden2", c.network.hidden2),
        METACORR_FIELD(std::size_t, "pretrain.steps", c.pretrain.steps),
        METACORR_FIELD(double, "pretrain.learning_rate", c.pretrain.learning_rate),
        METACORR_FIELD(double, "pretrain.momentum", c.pretrain.momentum),
        METACORR_FIELD(std::size_t, "pretrain.batch_images", c.pretrain.batch_images),
        METACORR_FIELD(double, "optimizer.virtual_lr", c.optimizer.virtual_lr),
        METACORR_FIELD(double, "optimizer.meta_lr", c.optimizer.meta_lr),
        METACORR_FIELD(double, "optimizer.actual_lr", c.optimizer.actual_lr),
        METACORR_FIELD(double, "optimizer.momentum", c.optimizer.momentum),
        METACORR_FIELD(double, "optimizer.weight_decay", c.optimizer.weight_decay),
        METACORR_FIELD(double, "optimizer.alpha0", c.optimizer.alpha[0]),
        METACORR_FIELD(double, "optimizer.alpha1", c.optimizer.alpha[1]),
        METACORR_FIELD(double, "optimizer.tau", c.optimizer.tau),
        METACORR_FIELD(std::size_t, "optimizer.steps", c.optimizer.steps),
        METACORR_FIELD(std::size_t, "optimizer.pseudo_refresh_every", c.optimizer.pseudo_refresh_every),
        METACORR_FIELD(std::size_t, "optimizer.meta_batch_pixels", c.optimizer.meta_batch_pixels),
        METACORR_FIELD(std::size_t, "optimizer.batch_images", c.optimizer.batch_images),
        METACORR_FIELD(std::size_t, "optimizer.eval_every", c.optimizer.eval_every),
        METACORR_FIELD(double, "optimizer.confidence_threshold", c.optimizer.confidence_threshold),
        {"noise.transition",
         [](const ExperimentConfig& c) {
           json rows = json::array();
           if (c.noise_transition)
             for (std::size_t r = 0; r < c.noise_transition->rows(); ++r) {
               json row = json::array();
               for (std::size_t k = 0; k < c.noise_transition->cols(); ++k) row.push_back(c.noise_transition->at(r, k));
               rows.push_back(row);
             }
           return rows;
         },
         [](ExperimentConfig& c, const json& v) {
           if (!v.is_array()) throw ConfigError("noise.transition must be an array of rows");
           if (v.empty()) {
             c.noise_transition.reset();
             return;
           }
           const std::size_t n = v.size();
           ad::Array t({n, n});
           for (std::size_t r = 0; r < n; ++r) {
             if (!v[r].is_array() || v[r].size() != n) throw ConfigError("noise.transition must be square");
             for (std::size_t k = 0; k < n; ++k) t.at(r, k) = as<double>(v[r][k], "noise.transition");
           }
           c.noise_transition = std::move(t);
         }},
        METACORR_FIELD(std::size_t, "ablation.seeds", c.ablation_seeds),
        {"ablation.methods", [](const ExperimentConfig& c) { return json(c.ablation_methods); },
         [](ExperimentConfig& c, const json& v) {
           if (!v.is_array()) throw ConfigError("ablation.methods must be an array of names");
           c.ablation_methods.clear();
           for (const json& m : v) c.ablation_methods.push_back(as<std::string>(m, "ablation.methods"));
         }},
    };
    return f;
  }();
  return all;
}

#undef METACORR_FIELD

const Field& find_field(std::string_view key) {
  for (const Field& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Drops a trailing comment; '#' inside a quoted string is kept.
std::string strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
    if (line[i] == '#' && !quoted) return std::string(line.substr(0, i));
  }
  return std::string(line);
}

void assign(ExperimentConfig& c, std::string_view assignment, const std::string& where) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
  const std::string key = trim(assignment.substr(0, eq));
  const std::string text = trim(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    throw ConfigError(where + "cannot parse value of '" + key + "': " + text);
  }
  try {
    find_field(key).set(c, value);
  } catch (const ConfigError& e) {
    throw ConfigError(where + e.what());
  }
}

void write_file(const std::filesystem::path& file, const std::string& bytes) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + file.string());
}

std::string fmt17(double v) {
  if (std::isnan(v)) return {};
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool has_meta_set(meta::Method m) {
  return m == meta::Method::kSingleDmlc || m == meta::Method::kMetaCorrection;
}

}  // namespace

void ExperimentConfig::validate() const {
  data.validate();
  optimizer.validate();
  meta::parse_method(method);
  for (const std::string& m : ablation_methods) meta::parse_method(m);
  if (ablation_methods.empty()) throw ConfigError("ablation.methods is empty");
  if (ablation_seeds == 0) throw ConfigError("ablation.seeds must be positive");
  if (network.hidden1 == 0 || network.hidden2 == 0) throw ConfigError("network widths must be positive");
  if (pretrain.batch_images == 0 || optimizer.batch_images == 0)
    throw ConfigError("batch_images must be positive");
  if (optimizer.eval_every == 0) throw ConfigError("optimizer.eval_every must be positive");
  if (optimizer.meta_batch_pixels == 0) throw ConfigError("optimizer.meta_batch_pixels must be positive");
  if (output_dir.empty()) throw ConfigError("output_dir is empty");
  if (noise_transition) {
    if (noise_transition->rows() != data.classes)
      throw ConfigError("noise.transition must be " + std::to_string(data.classes) + " x " +
                        std::to_string(data.classes));
    data::NoiseSpec{*noise_transition, 0}.validate();
  }
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string body = trim(strip_comment(line));
    if (body.empty()) continue;
    if (body.front() == '[') throw ConfigError("line " + std::to_string(n) + ": tables are not supported, use dotted keys");
    assign(c, body, "line " + std::to_string(n) + ": ");
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + file.string());
  std::ostringstream s;
  s << in.rdbuf();
  return parse_config(s.str());
}

void apply_override(ExperimentConfig& config, std::string_view assignment) {
  assign(config, assignment, "--set " + std::string(assignment) + ": ");
}

std::string to_text(const ExperimentConfig& config) {
  std::string out;
  for (const Field& f : fields()) {
    const json v = f.get(config);
    std::string text;
    if (v.is_number_float()) {
      char buf[40];
      const auto end = std::to_chars(buf, buf + sizeof buf, v.get<double>()).ptr;
      text.assign(buf, end);
      if (text.find_first_of(".eEn") == std::string::npos) text += ".0";
    } else {
      text = v.dump();
    }
    out += f.key + " = " + text + "\n";
  }
  return out;
}

std::filesystem::path resolve_output(const std::filesystem::path& dir) {
  const char* root = std::getenv("METACORR_OUTPUT_ROOT");
  if (root && *root && dir.is_relative()) return std::filesystem::path(root) / dir;
  return dir;
}

Prepared prepare(const ExperimentConfig& config) {
  config.validate();
  Prepared p;
  if (config.data_dir.empty()) {
    data::DatasetConfig dc = config.data;
    dc.seed = config.seed;
    p.dataset = data::generate_dataset(dc);
  } else {
    p.dataset = data::load_dataset(config.data_dir);
  }
  models::PretrainConfig pc = config.pretrain;
  pc.seed = config.seed;
  models::SegNetShape shape = config.network;
  shape.classes = p.dataset.config.classes;
  p.w0 = models::pretrain_source(models::init_segmentation(shape, config.seed), p.dataset.source, pc);
  p.u0 = models::pretrain_domain(models::init_domain_predictor(config.seed), p.dataset.source,
                                 p.dataset.target, pc);
  p.pseudo = meta::generate_pseudo_labels(p.w0, p.dataset.target);
  if (config.noise_transition) {
    if (config.noise_transition->rows() != p.dataset.config.classes)
      throw ConfigError("noise.transition does not match the dataset's class count");
    p.t_true = *config.noise_transition;
    const data::NoiseSpec spec{*p.t_true, CounterRng(config.seed).split("label_noise").key()};
    p.pseudo.maps = eval::TruthAccess::noisy_labels(p.dataset.target_truth, spec);
  }
  return p;
}

RunOutput run(const ExperimentConfig& config, const Prepared& prepared) {
  const meta::Method method = meta::parse_method(config.method);
  meta::OptimizerConfig oc = config.optimizer;
  oc.seed = config.seed;
  const meta::TrainInputs in{&prepared.dataset, &prepared.w0, &prepared.u0, &prepared.pseudo};
  RunOutput out{meta::train(method, oc, in), {}};
  const eval::TargetScore score = eval::score_target(out.result.w, prepared.dataset);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  RunSummary& s = out.summary;
  s.method = std::string(meta::method_name(method));
  s.seed = config.seed;
  s.target_accuracy = score.accuracy;
  s.miou_target = score.miou;
  s.ntm_error = prepared.t_true ? eval::ntm_frobenius_error(out.result.T[0], *prepared.t_true) : nan;
  s.meta_precision = has_meta_set(method) ? out.result.meta_set.invariant_precision(prepared.dataset.source) : nan;
  s.pseudo_noise_rate = eval::pseudo_noise_rate(prepared.pseudo.maps, prepared.dataset.target_truth);
  s.fallback_count = out.result.meta_set.fallback_count();
  return out;
}

std::string label_pgm(const std::vector<std::vector<int>>& maps, std::size_t height, std::size_t width,
                      std::size_t classes, std::size_t columns) {
  if (maps.empty() || classes < 2 || columns == 0) throw std::invalid_argument("label_pgm: nothing to draw");
  const std::size_t cols = std::min(columns, maps.size());
  const std::size_t rows = (maps.size() + cols - 1) / cols;
  const std::size_t W = cols * width, H = rows * height;
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  std::string px(W * H, '\0');
  for (std::size_t m = 0; m < maps.size(); ++m) {
    if (maps[m].size() != height * width) throw std::invalid_argument("label_pgm: map size mismatch");
    const std::size_t oy = (m / cols) * height, ox = (m % cols) * width;
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const auto k = static_cast<std::size_t>(maps[m][y * width + x]);
        px[(oy + y) * W + ox + x] = static_cast<char>(k * 255 / (classes - 1));
      }
  }
  return out + px;
}

void write_run(const std::filesystem::path& dir, const ExperimentConfig& config, const Prepared& prepared,
               const RunOutput& output) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "config.toml", to_text(config));
  write_file(dir / "history.csv", meta::history_csv(output.result.history));
  write_file(dir / "ntm_history.csv", meta::ntm_history_csv(output.result.history));
  write_file(dir / "summary.csv", ablation_csv({output.summary}));
  models::save_checkpoint(output.result.w, dir / "checkpoint");
  ad::ParamSet t;
  for (std::size_t l = 0; l < meta::kLevels; ++l) t.add("T" + std::to_string(l), output.result.T[l]);
  models::save_checkpoint(t, dir / "ntm");
  const data::Dataset& ds = prepared.dataset;
  const std::size_t C = ds.config.classes;
  std::vector<std::vector<int>> truth;
  for (std::size_t i = 0; i < ds.target.size(); ++i) truth.push_back(eval::TruthAccess::labels(ds.target_truth, i));
  write_file(dir / "target_predictions.pgm",
             label_pgm(eval::predict_target(output.result.w, ds), ds.config.height, ds.config.width, C));
  write_file(dir / "target_truth.pgm", label_pgm(truth, ds.config.height, ds.config.width, C));
  write_file(dir / "target_pseudo_labels.pgm", label_pgm(prepared.pseudo.maps, ds.config.height, ds.config.width, C));
}

std::string ablation_csv(const std::vector<RunSummary>& rows) {
  std::string out =
      "method,seed,target_accuracy,miou_target,ntm_error,meta_precision,"
      "target_accuracy_std,miou_target_std,ntm_error_std,meta_precision_std\n";
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunSummary*>> by_method;
  for (const RunSummary& r : rows) {
    if (!by_method.count(r.method)) order.push_back(r.method);
    by_method[r.method].push_back(&r);
    out += r.method + "," + std::to_string(r.seed) + "," + fmt17(r.target_accuracy) + "," +
           fmt17(r.miou_target) + "," + fmt17(r.ntm_error) + "," + fmt17(r.meta_precision) + ",,,,\n";
  }
  using Getter = double (*)(const RunSummary&);
  const Getter getters[] = {[](const RunSummary& r) { return r.target_accuracy; },
                            [](const RunSummary& r) { return r.miou_target; },
                            [](const RunSummary& r) { return r.ntm_error; },
                            [](const RunSummary& r) { return r.meta_precision; }};
  for (const std::string& m : order) {
    const auto& cells = by_method[m];
    std::string means, stds;
    for (Getter g : getters) {
      double sum = 0.0;
      for (const RunSummary* r : cells) sum += g(*r);
      const double mean = sum / static_cast<double>(cells.size());
      double sq = 0.0;
      for (const RunSummary* r : cells) sq += (g(*r) - mean) * (g(*r) - mean);
      means += "," + fmt17(mean);
      stds += "," + fmt17(std::sqrt(sq / static_cast<double>(cells.size())));
    }
    out += m + ",mean" + means + stds + "\n";
  }
  return out;
}

}  // namespace metacorr::experiment
