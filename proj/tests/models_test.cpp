#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "metacorr/check/finite_difference.hpp"
#include "metacorr/models/networks.hpp"

namespace metacorr::models {
namespace {

data::DatasetConfig small_config(std::uint64_t seed, double shift = 0.6) {
  data::DatasetConfig c;
  c.height = 8;
  c.width = 8;
  c.images_per_domain = 16;
  c.shift_strength = shift;
  c.seed = seed;
  return c;
}

ad::ParamSet zeroed(const ad::ParamSet& p) { return p.zeros_like(); }

TEST(Networks, DefaultSizeIsWithinBudget) {
  const auto w = init_segmentation({}, 0);
  EXPECT_EQ(w.parameter_count(), 880u);
  EXPECT_LE(w.parameter_count(), kMaxSegmentationParams);
  EXPECT_THROW(init_segmentation({4, 32, 32}, 0), std::invalid_argument);
}

TEST(Networks, ZeroWeightsGiveUniformOutputs) {
  const auto ds = data::generate_dataset(small_config(1));
  const std::vector<std::size_t> idx{0, 1};
  const ad::Array px = data::stack_pixels(ds.source, idx);
  const ad::WindowGeometry geo{2, 8, 8};
  const auto [deep, shallow] = forward_seg(px, geo, zeroed(init_segmentation({}, 0)));
  for (double v : deep.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  for (double v : shallow.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  const ad::Array dom = forward_domain(px, geo, zeroed(init_domain_predictor(0)));
  for (double v : dom.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Networks, ProbabilitiesSumToOne) {
  const auto ds = data::generate_dataset(small_config(2));
  const std::vector<std::size_t> idx{3};
  const auto [deep, shallow] =
      forward_seg(data::stack_pixels(ds.source, idx), {1, 8, 8}, init_segmentation({}, 7));
  for (const ad::Array* a : {&deep, &shallow})
    for (std::size_t r = 0; r < a->rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < a->cols(); ++c) s += a->at(r, c);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Networks, RejectsWrongPixelShape) {
  EXPECT_THROW(forward_seg(ad::Array({64, 4}), {1, 8, 8}, init_segmentation({}, 0)), ad::ShapeError);
}

TEST(Networks, SiteEvaluationMatchesWholeImage) {
  const auto ds = data::generate_dataset(small_config(3));
  const auto w = init_segmentation({}, 11);
  const std::vector<std::size_t> idx{0, 1};
  const auto [deep, shallow] = forward_seg(data::stack_pixels(ds.source, idx), {2, 8, 8}, w);
  std::vector<PixelSite> sites{{0, 0, 0}, {0, 7, 7}, {1, 3, 4}, {1, 0, 5}, {0, 7, 0}};
  ad::Graph g;
  const SegOutputs out = build_segmentation_sites(
      g, g.bind(w), gather_sites(std::span(ds.source).subspan(0, 2), sites));
  for (std::size_t s = 0; s < sites.size(); ++s) {
    const std::size_t row = sites[s].image * 64 + sites[s].y * 8 + sites[s].x;
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_NEAR(out.deep.value().at(s, c), deep.at(row, c), 1e-12);
      EXPECT_NEAR(out.shallow.value().at(s, c), shallow.at(row, c), 1e-12);
    }
  }
}

TEST(Networks, SegmentationGradientMatchesFiniteDifferences) {
  const auto ds = data::generate_dataset(small_config(4));
  const std::vector<std::size_t> idx{0};
  const ad::Array px = data::stack_pixels(ds.source, idx);
  const ad::WindowGeometry geo{1, 8, 8};
  auto labels = std::make_shared<std::vector<int>>(ds.source[0].labels);
  const auto w = init_segmentation({}, 5);
  auto loss_of = [&](ad::Graph& g, const VarMap& vars) {
    const SegOutputs out = build_segmentation(g, vars, g.constant(px), geo);
    return cross_entropy(out.deep, labels) + ad::scale(cross_entropy(out.shallow, labels), 0.1);
  };
  ad::Graph g;
  const ad::ParamSet analytic = g.gradient(loss_of(g, g.bind(w)));
  const ad::ParamSet numeric = check::central_difference(
      [&](const ad::ParamSet& p) {
        ad::Graph h;
        return loss_of(h, h.bind(p)).value().item();
      },
      w, {}, 1e-5);
  EXPECT_LE(check::compare(analytic, numeric).max_relative_error, 1e-4);
}

TEST(Networks, MaskedLossWithAllOnesEqualsPlainLoss) {
  ad::Graph g;
  ad::Var p = g.param("p", ad::Array::matrix(3, 2, {0.2, 0.8, 0.6, 0.4, 0.5, 0.5}));
  auto labels = std::make_shared<std::vector<int>>(std::vector<int>{1, 0, 1});
  const double plain = cross_entropy(p, labels).value().item();
  const double masked = masked_cross_entropy(p, labels, ad::Array({3, 1}, 1.0)).value().item();
  EXPECT_EQ(plain, masked);
  const double half = masked_cross_entropy(p, labels, ad::Array::matrix(3, 1, {1, 0, 0})).value().item();
  EXPECT_NEAR(half, -std::log(0.8), 1e-15);
  EXPECT_EQ(masked_cross_entropy(p, labels, ad::Array({3, 1})).value().item(), 0.0);
}

TEST(Networks, ArgmaxTiesGoToLowestIndex) {
  EXPECT_EQ(argmax_rows(ad::Array::matrix(2, 3, {0.3, 0.3, 0.3, 0.1, 0.45, 0.45})),
            (std::vector<int>{0, 1}));
}

TEST(Pretrain, ZeroStepsIsIdentity) {
  const auto ds = data::generate_dataset(small_config(5));
  const auto w = init_segmentation({}, 2);
  PretrainConfig pc;
  pc.steps = 0;
  EXPECT_EQ(pretrain_source(w, ds.source, pc), w);
  const auto u = init_domain_predictor(2);
  EXPECT_EQ(pretrain_domain(u, ds.source, ds.target, pc), u);
}

double source_accuracy(const data::Dataset& ds, const ad::ParamSet& w) {
  std::vector<std::size_t> idx(ds.source.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto [deep, shallow] = forward_seg(data::stack_pixels(ds.source, idx),
                                           {idx.size(), ds.config.height, ds.config.width}, w);
  const auto pred = argmax_rows(deep);
  std::size_t hit = 0, n = 0;
  for (const auto& img : ds.source)
    for (int l : img.labels) hit += pred[n++] == l;
  return static_cast<double>(hit) / static_cast<double>(n);
}

TEST(Pretrain, SourceTrainingLearnsTheTask) {
  const auto ds = data::generate_dataset(small_config(6));
  const auto w0 = init_segmentation({}, 6);
  PretrainConfig pc;
  pc.steps = 150;
  pc.seed = 6;
  const auto w = pretrain_source(w0, ds.source, pc);
  EXPECT_GT(source_accuracy(ds, w), source_accuracy(ds, w0));
  EXPECT_GT(source_accuracy(ds, w), 0.9);
}

double mean_domain_score(const ad::Array& scores, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += scores[i];
  return s / static_cast<double>(end - begin);
}

struct DomainScores {
  double accuracy;
  double target_mean;
  double source_variant_mean;
};

DomainScores domain_scores(std::uint64_t seed, double shift) {
  const auto ds = data::generate_dataset(small_config(seed, shift));
  PretrainConfig pc;
  pc.steps = 150;
  pc.seed = seed;
  const auto u = pretrain_domain(init_domain_predictor(seed), ds.source, ds.target, pc);
  std::vector<std::size_t> idx(ds.source.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const ad::WindowGeometry geo{idx.size(), 8, 8};
  const ad::Array s = forward_domain(data::stack_pixels(ds.source, idx), geo, u);
  const ad::Array t = forward_domain(data::stack_pixels(ds.target, idx), geo, u);
  double correct = 0.0, variant = 0.0, variant_n = 0.0;
  std::size_t n = 0;
  for (const auto& img : ds.source)
    for (std::uint8_t inv : img.invariant) {
      correct += s[n] < 0.5;
      if (!inv) {
        variant += s[n];
        variant_n += 1;
      }
      ++n;
    }
  for (std::size_t i = 0; i < t.size(); ++i) correct += t[i] >= 0.5;
  return {correct / static_cast<double>(s.size() + t.size()), mean_domain_score(t, 0, t.size()),
          variant / variant_n};
}

TEST(Pretrain, DomainPredictorSeparatesShiftedDomains) {
  EXPECT_GT(domain_scores(7, 0.6).accuracy, 0.5);
  const double chance = domain_scores(7, 0.0).accuracy;
  EXPECT_GE(chance, 0.4);
  EXPECT_LE(chance, 0.6);
}

TEST(Pretrain, TargetScoresExceedVariantSourceScores) {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    const DomainScores d = domain_scores(seed, 0.6);
    EXPECT_GT(d.target_mean, d.source_variant_mean) << "seed " << seed;
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto w = init_segmentation({}, 9);
  const auto dir = std::filesystem::temp_directory_path() / "metacorr_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(w, dir);
  EXPECT_EQ(load_checkpoint(dir), w);
  std::filesystem::resize_file(dir / "params.f64", 80);
  EXPECT_THROW(load_checkpoint(dir), std::runtime_error);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace metacorr::models
