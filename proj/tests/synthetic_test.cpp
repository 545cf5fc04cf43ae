#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "metacorr/data/synthetic.hpp"
#include "metacorr/rng.hpp"

namespace metacorr::data {
namespace {

std::vector<std::size_t> histogram(const std::vector<int>& labels, std::size_t classes) {
  std::vector<std::size_t> h(classes, 0);
  for (int l : labels) ++h[static_cast<std::size_t>(l)];
  return h;
}

TEST(Layout, SingleClassIsAllZero) {
  DatasetConfig c;
  c.classes = 1;
  for (int l : generate_layout(c, 3)) EXPECT_EQ(l, 0);
}

TEST(Layout, EveryClassIsPresent) {
  for (std::size_t classes : {2u, 4u, 9u, 16u}) {
    for (std::size_t side : {4u, 5u, 16u}) {
      DatasetConfig c;
      c.classes = classes;
      c.height = side;
      c.width = side;
      for (std::size_t i = 0; i < 20; ++i) {
        for (std::size_t count : histogram(generate_layout(c, i), classes))
          EXPECT_GT(count, 0u) << "C=" << classes << " side=" << side << " image " << i;
      }
    }
  }
}

TEST(Layout, IsDeterministic) {
  DatasetConfig c;
  c.seed = 99;
  EXPECT_EQ(generate_layout(c, 5), generate_layout(c, 5));
  EXPECT_NE(generate_layout(c, 5), generate_layout(c, 6));
}

TEST(Render, ZeroNoiseZeroShiftGivesPrototypes) {
  DatasetConfig c;
  c.sigma_source = 0.0;
  c.shift_strength = 0.0;
  const auto labels = generate_layout(c, 0);
  for (Domain d : {Domain::kSource, Domain::kTarget}) {
    LabeledImage img = render(labels, d, c, 0);
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const auto proto = prototype_color(static_cast<std::size_t>(labels[p]));
      for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(img.pixels[p * 3 + ch], proto[ch]);
    }
  }
}

TEST(Render, ZeroShiftDomainsAreIdenticallyDistributed) {
  // With zero shift both domains draw prototype + N(0, sigma); compare the
  // per-class channel means over many pixels.
  DatasetConfig c;
  c.shift_strength = 0.0;
  std::vector<double> sum_s(12, 0.0), sum_t(12, 0.0);
  std::vector<double> n_s(4, 0.0), n_t(4, 0.0);
  for (std::size_t i = 0; i < 40; ++i) {
    const auto labels = generate_layout(c, i);
    const auto s = render(labels, Domain::kSource, c, i);
    const auto t = render(labels, Domain::kTarget, c, 1000 + i);
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const auto k = static_cast<std::size_t>(labels[p]);
      n_s[k] += 1;
      n_t[k] += 1;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        sum_s[k * 3 + ch] += s.pixels[p * 3 + ch];
        sum_t[k * 3 + ch] += t.pixels[p * 3 + ch];
      }
    }
  }
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t ch = 0; ch < 3; ++ch) {
      // 3 standard errors of a difference of means (sigma = 0.05).
      const double se = 0.05 * std::sqrt(1.0 / n_s[k] + 1.0 / n_t[k]);
      EXPECT_NEAR(sum_s[k * 3 + ch] / n_s[k], sum_t[k * 3 + ch] / n_t[k], 3 * se);
    }
}

TEST(Render, DomainGapGrowsWithShiftStrength) {
  double previous = -1.0;
  for (double s : {0.0, 0.3, 0.6}) {
    DatasetConfig c;
    c.shift_strength = s;
    c.invariant_fraction = 0.0;
    CounterRng pick(17);
    double total = 0.0;
    for (std::size_t n = 0; n < 1000; ++n) {
      const std::size_t cls = pick.below(c.classes);
      std::vector<int> labels(c.pixels(), static_cast<int>(cls));
      const auto src = render(labels, Domain::kSource, c, n);
      const auto tgt = render(labels, Domain::kTarget, c, 5000 + n);
      const std::size_t p = pick.below(c.pixels());
      double d2 = 0.0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double d = src.pixels[p * 3 + ch] - tgt.pixels[p * 3 + ch];
        d2 += d * d;
      }
      total += std::sqrt(d2);
    }
    const double mean_distance = total / 1000.0;
    EXPECT_GT(mean_distance, previous) << "shift " << s;
    previous = mean_distance;
  }
}

TEST(Render, InvariantMaskCoversRequestedFraction) {
  DatasetConfig c;
  Dataset ds = generate_dataset(c);
  double covered = 0.0, total = 0.0;
  for (const auto& img : ds.source) {
    covered += std::accumulate(img.invariant.begin(), img.invariant.end(), 0.0);
    total += static_cast<double>(img.invariant.size());
  }
  const double rate = covered / total;
  const double sd = std::sqrt(0.2 * 0.8 / total);
  EXPECT_NEAR(rate, 0.2, 4 * sd);
}

TEST(Render, PrototypesAreSeparated) {
  const DatasetConfig c;
  for (std::size_t a = 0; a < 16; ++a)
    for (std::size_t b = a + 1; b < 16; ++b) {
      const auto pa = prototype_color(a), pb = prototype_color(b);
      double d2 = 0.0;
      for (std::size_t ch = 0; ch < 3; ++ch) d2 += (pa[ch] - pb[ch]) * (pa[ch] - pb[ch]);
      EXPECT_GE(std::sqrt(d2), 4 * c.sigma_source);
    }
}

TEST(NoiseInjection, IdentityLeavesLabelsUnchanged) {
  DatasetConfig c;
  const auto labels = generate_layout(c, 0);
  NoiseSpec spec{ad::Array::identity(4), 3};
  EXPECT_EQ(inject_label_noise(labels, spec), labels);
}

TEST(NoiseInjection, BinaryFlipRateWithinThreeSigma) {
  NoiseSpec spec{ad::Array::matrix(2, 2, {0.8, 0.2, 0.0, 1.0}), 21};
  const std::size_t n = 20000;
  std::vector<int> labels(n, 0);
  const auto noisy = inject_label_noise(labels, spec);
  const double flips = static_cast<double>(std::count(noisy.begin(), noisy.end(), 1));
  const double sd = std::sqrt(n * 0.2 * 0.8);
  EXPECT_NEAR(flips, 0.2 * n, 3 * sd);
}

TEST(NoiseInjection, UniformRowsGiveUniformHistogram) {
  NoiseSpec spec{ad::Array({4, 4}, 0.25), 8};
  std::vector<int> labels(40000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 4);
  const auto h = histogram(inject_label_noise(labels, spec), 4);
  const double n = 40000.0, sd = std::sqrt(n * 0.25 * 0.75);
  for (std::size_t count : h) EXPECT_NEAR(static_cast<double>(count), n / 4, 3 * sd);
}

TEST(NoiseInjection, EmpiricalConfusionConvergesToTransition) {
  NoiseSpec spec{ad::Array::matrix(3, 3, {0.7, 0.2, 0.1, 0.05, 0.9, 0.05, 0.3, 0.0, 0.7}), 4};
  const std::size_t per_class = 100000;
  std::vector<int> labels(per_class * 3);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
  const auto noisy = inject_label_noise(labels, spec);
  ad::Array counts({3, 3});
  for (std::size_t i = 0; i < labels.size(); ++i)
    counts.at(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(noisy[i])) += 1;
  double frob = 0.0;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = counts.at(r, c) / per_class - spec.transition.at(r, c);
      frob += d * d;
    }
  EXPECT_LE(std::sqrt(frob), 0.05);
}

TEST(NoiseInjection, RejectsNonStochasticMatrix) {
  NoiseSpec bad{ad::Array::matrix(2, 2, {0.5, 0.4, 0.0, 1.0}), 0};
  EXPECT_THROW(inject_label_noise({0, 1}, bad), DataError);
  NoiseSpec negative{ad::Array::matrix(2, 2, {1.2, -0.2, 0.0, 1.0}), 0};
  EXPECT_THROW(inject_label_noise({0, 1}, negative), DataError);
}

TEST(Dataset, IsAPureFunctionOfConfig) {
  DatasetConfig c;
  c.images_per_domain = 6;
  c.seed = 5;
  Dataset a = generate_dataset(c), b = generate_dataset(c);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a.source[i].pixels, b.source[i].pixels);
    EXPECT_EQ(a.source[i].labels, b.source[i].labels);
    EXPECT_EQ(a.target[i].pixels, b.target[i].pixels);
  }
}

TEST(Dataset, RejectsInvalidConfig) {
  DatasetConfig c;
  c.height = 3;
  EXPECT_THROW(generate_dataset(c), DataError);
  c = DatasetConfig{};
  c.classes = 17;
  EXPECT_THROW(generate_dataset(c), DataError);
  c = DatasetConfig{};
  c.invariant_fraction = 1.5;
  EXPECT_THROW(generate_dataset(c), DataError);
}

TEST(Dataset, SaveLoadPreservesContentAndSizes) {
  DatasetConfig c;
  c.images_per_domain = 5;
  c.height = 6;
  c.width = 7;
  Dataset ds = generate_dataset(c);
  const auto dir = std::filesystem::temp_directory_path() / "metacorr_synthetic_test";
  std::filesystem::remove_all(dir);
  save_dataset(ds, dir);
  EXPECT_EQ(std::filesystem::file_size(dir / "source_pixels.f64"), 5u * 6 * 7 * 3 * 8);
  Dataset back = load_dataset(dir);
  EXPECT_EQ(back.config.height, 6u);
  EXPECT_EQ(back.config.width, 7u);
  ASSERT_EQ(back.source.size(), 5u);
  EXPECT_EQ(back.source[2].pixels, ds.source[2].pixels);
  EXPECT_EQ(back.source[4].invariant, ds.source[4].invariant);
  EXPECT_EQ(back.target[3].pixels, ds.target[3].pixels);
  EXPECT_EQ(back.target_truth.size(), 5u);

  std::filesystem::resize_file(dir / "target_pixels.f64", 16);
  EXPECT_THROW(load_dataset(dir), DataError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace metacorr::data
