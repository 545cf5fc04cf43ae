#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "metacorr/autodiff/array.hpp"

namespace metacorr::eval {
class TruthAccess;
}

namespace metacorr::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t classes = 4;
  std::size_t images_per_domain = 64;
  double sigma_source = 0.05;
  double shift_strength = 0.6;
  double invariant_fraction = 0.2;
  std::uint64_t seed = 0;

  // Throws DataError when H, W < 4, C outside [2, 16], or a fraction or
  // magnitude is outside [0, 1].
  void validate() const;
  std::size_t pixels() const { return height * width; }
};

enum class Domain { kSource, kTarget };

struct LabeledImage {
  std::size_t height = 0;
  std::size_t width = 0;
  Domain domain = Domain::kSource;
  std::vector<double> pixels;          // (y, x, channel) row-major, in [0, 1]
  std::vector<int> labels;             // (y, x) row-major
  std::vector<std::uint8_t> invariant;  // source only: near-zero-shift mask
};

// Row-stochastic matrix T with T[j][k] = p(noisy = k | clean = j).
struct NoiseSpec {
  ad::Array transition;
  std::uint64_t seed = 0;

  void validate() const;
};

// Target ground truth. Only metacorr::eval can read the maps; training code
// sees the count and nothing else.
class QuarantinedLabels {
 public:
  QuarantinedLabels() = default;
  explicit QuarantinedLabels(std::vector<std::vector<int>> maps) : maps_(std::move(maps)) {}
  std::size_t size() const { return maps_.size(); }

  void write(const std::filesystem::path& file) const;
  static QuarantinedLabels read(const std::filesystem::path& file, std::size_t images,
                                std::size_t pixels);

 private:
  friend class metacorr::eval::TruthAccess;
  std::vector<std::vector<int>> maps_;
};

// Pixels of a target image; labels are held separately in QuarantinedLabels.
struct TargetImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
};

struct Dataset {
  DatasetConfig config;
  std::vector<LabeledImage> source;
  std::vector<TargetImage> target;
  QuarantinedLabels target_truth;
};

// Fixed prototype colors on a 3-level grid; pairwise distance >= 0.35.
std::array<double, 3> prototype_color(std::size_t cls);

// Affine color map of the target domain at a given magnitude:
// color -> A(m) color + b(m) with A(0) = I, b(0) = 0.
std::array<double, 3> shift_color(const std::array<double, 3>& color, double magnitude);

// Voronoi layout from two sites per class; every class gets at least one
// pixel. Deterministic in (seed, image_index).
std::vector<int> generate_layout(const DatasetConfig& config, std::size_t image_index);

LabeledImage render(const std::vector<int>& labels, Domain domain,
                    const DatasetConfig& config, std::size_t image_index);

// Resamples every label j to k with probability T[j][k]. `stream` selects an
// independent random stream under spec.seed.
std::vector<int> inject_label_noise(const std::vector<int>& labels, const NoiseSpec& spec,
                                    std::uint64_t stream = 0);

// Source images use indices [0, N), target images [N, 2N).
Dataset generate_dataset(const DatasetConfig& config);

// Directory of flat little-endian arrays plus manifest.json.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// (images * H * W) x 3 pixel matrix, rows ordered (image, y, x).
ad::Array stack_pixels(std::span<const LabeledImage> images, std::span<const std::size_t> which);
ad::Array stack_pixels(std::span<const TargetImage> images, std::span<const std::size_t> which);

}  // namespace metacorr::data
