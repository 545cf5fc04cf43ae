#include <cmath>
#include <memory>

#include <gtest/gtest.h>

#include "metacorr/autodiff/graph.hpp"
#include "metacorr/check/finite_difference.hpp"
#include "metacorr/check/primitive_checks.hpp"
#include "metacorr/rng.hpp"

namespace metacorr::ad {
namespace {

Array random_matrix(CounterRng& rng, std::size_t r, std::size_t c, double lo = -2, double hi = 2) {
  Array a({r, c});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

TEST(Forward, SquareOfThree) {
  Graph g;
  Var x = g.param("x", Array::scalar(3.0));
  EXPECT_EQ((x * x).value().item(), 9.0);
}

TEST(Forward, SoftmaxOfEqualLogits) {
  Graph g;
  Var s = softmax(g.constant(Array::matrix(1, 2, {0.0, 0.0})));
  EXPECT_EQ(s.value()[0], 0.5);
  EXPECT_EQ(s.value()[1], 0.5);
}

TEST(Forward, MatmulMatchesNaiveTripleLoop) {
  CounterRng rng(7);
  const Array a = random_matrix(rng, 3, 3), b = random_matrix(rng, 3, 3);
  Graph g;
  Var p = matmul(g.constant(a), g.constant(b));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double naive = 0.0;
      for (std::size_t k = 0; k < 3; ++k) naive += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(p.value().at(i, j), naive, 1e-12);
    }
}

TEST(Forward, ReevaluationTracksLeafValues) {
  Graph g;
  Var x = g.param("x", Array::scalar(3.0));
  Var y = x * x + x;
  ParamSet leaves;
  leaves.add("x", Array::scalar(-2.0));
  EXPECT_EQ(g.forward(leaves, y).item(), 2.0);
  leaves.set("x", Array::scalar(3.0));
  EXPECT_EQ(g.forward(leaves, y).item(), 12.0);
}

TEST(Forward, ShapeMismatchNamesTheNode) {
  Graph g;
  Var a = g.param("a", Array({2, 3}));
  Var b = g.param("b", Array({3, 3}));
  try {
    add(a, b);
    FAIL() << "expected a shape error";
  } catch (const GraphError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
  try {
    matmul(b, a);
    FAIL() << "expected a shape error";
  } catch (const GraphError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
}

TEST(Forward, NonFiniteIntermediateNamesTheNode) {
  Graph g;
  Var x = g.param("x", Array::scalar(0.0));
  try {
    log(x);
    FAIL() << "expected a non-finite error";
  } catch (const GraphError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
}

TEST(Forward, LeafShapeMismatchOnReevaluation) {
  Graph g;
  Var x = g.param("x", Array({2, 2}));
  Var s = sum(x);
  ParamSet wrong;
  wrong.add("x", Array({3, 2}));
  EXPECT_THROW(g.forward(wrong, s), GraphError);
  EXPECT_THROW(g.forward(ParamSet{}, s), GraphError);
}

TEST(Gradient, SquareAtThree) {
  Graph g;
  Var x = g.param("x", Array::scalar(3.0));
  EXPECT_EQ(g.gradient(x * x).at("x").item(), 6.0);
}

TEST(Gradient, SoftmaxCrossEntropyWithSymmetricLogits) {
  Graph g;
  Var z = g.param("z", Array::matrix(1, 2, {0.0, 0.0}));
  auto label = std::make_shared<const std::vector<int>>(std::vector<int>{0});
  Var loss = scale(log(gather(softmax(z), label)), -1.0);
  const Array dz = g.gradient(loss).at("z");
  EXPECT_NEAR(dz[0], -0.5, 1e-15);
  EXPECT_NEAR(dz[1], 0.5, 1e-15);
}

TEST(Gradient, RootMustBeScalar) {
  Graph g;
  Var x = g.param("x", Array({2, 2}, 1.0));
  EXPECT_THROW(g.gradient(x * x), GraphError);
}

TEST(Gradient, UnreachableParameterGetsZero) {
  Graph g;
  Var x = g.param("x", Array::scalar(2.0));
  g.param("unused", Array({2, 3}, 5.0));
  ParamSet grads = g.gradient(x * x);
  EXPECT_EQ(grads.at("unused"), Array({2, 3}, 0.0));
}

TEST(Gradient, TwoLayerPerPixelNetMatchesFiniteDifferences) {
  CounterRng rng(11);
  const Array pixels = random_matrix(rng, 6, 3);
  auto labels = std::make_shared<const std::vector<int>>(std::vector<int>{0, 1, 2, 3, 1, 0});
  ParamSet params;
  params.add("w1", random_matrix(rng, 3, 5, -1, 1));
  params.add("b1", random_matrix(rng, 1, 5, -1, 1));
  params.add("w2", random_matrix(rng, 5, 4, -1, 1));
  params.add("b2", random_matrix(rng, 1, 4, -1, 1));
  auto build = [&](Graph& g, const ParamSet& p) {
    auto v = g.bind(p);
    Var x = g.constant(pixels);
    Var h = leaky_relu(matmul(x, v.at("w1")) + broadcast_rows(v.at("b1"), 6));
    Var logits = matmul(h, v.at("w2")) + broadcast_rows(v.at("b2"), 6);
    return scale(mean(log(gather(softmax(logits), labels))), -1.0);
  };
  Graph g;
  Var loss = build(g, params);
  const ParamSet analytic = g.gradient(loss);
  const ParamSet numeric = check::central_difference(
      [&](const ParamSet& p) {
        Graph fresh;
        return build(fresh, p).value().item();
      },
      params, params.names(), 1e-4);
  EXPECT_LE(check::compare(analytic, numeric).max_relative_error, 1e-5);
}

TEST(Gradient, EveryPrimitiveMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& r : check::check_primitives(seed)) {
      EXPECT_TRUE(r.passed) << r.name << " rel err " << r.max_relative_error << " at "
                            << r.worst_entry;
    }
  }
}

TEST(Gradient, CorruptedSoftmaxBackwardIsDetected) {
  auto results = check::check_primitives(1, 1e-4, 1e-5, check::FaultInjection{OpKind::kSoftmax, 1.5});
  for (const auto& r : results) {
    EXPECT_EQ(r.passed, r.name != "softmax") << r.name;
  }
}

TEST(Gradient, IsLinearInTheRoot) {
  CounterRng rng(5);
  Graph g;
  Var x = g.param("x", random_matrix(rng, 3, 3));
  Var y = g.param("y", random_matrix(rng, 3, 3));
  Var f = sum(softmax(matmul(x, y)) * x);
  Var h = sum(sigmoid(x - y) * y);
  const double a = 0.7, b = -1.3;
  ParamSet combined = g.gradient(add(scale(f, a), scale(h, b)));
  ParamSet gf = g.gradient(f), gh = g.gradient(h);
  for (const auto& name : {"x", "y"}) {
    for (std::size_t i = 0; i < 9; ++i) {
      const double expect = a * gf.at(name)[i] + b * gh.at(name)[i];
      EXPECT_NEAR(combined.at(name)[i], expect, 1e-12);
    }
  }
}

TEST(Gradient, RepeatedPassesAreBitIdentical) {
  auto run = [] {
    CounterRng rng(3);
    Graph g;
    Var x = g.param("x", random_matrix(rng, 4, 3));
    Var t = g.param("t", random_matrix(rng, 3, 3, 0.1, 1.0));
    Var loss = sum(log(matmul(softmax(x), t)));
    return std::make_pair(loss.value(), g.gradient(loss));
  };
  auto first = run();
  auto second = run();
  EXPECT_EQ(first.first, second.first);
  EXPECT_EQ(first.second, second.second);
}

TEST(MixedSecond, SquaredWeightTimesT) {
  // l = w^2 t, v = 1: d/dt (2 w t v) = 2 w v = 6 at w = 3.
  Graph g;
  Var w = g.param("w", Array::scalar(3.0));
  Var t = g.param("t", Array::scalar(0.4));
  ParamSet v;
  v.add("w", Array::scalar(1.0));
  EXPECT_DOUBLE_EQ(mixed_second_gradient(w * w * t, v, {"t"}).at("t").item(), 6.0);
}

TEST(MixedSecond, WeightTimesSquaredT) {
  // l = w t^2, v = 0.5, t = 2: d/dt (t^2 v) = 2 t v = 2.
  Graph g;
  Var w = g.param("w", Array::scalar(1.5));
  Var t = g.param("t", Array::scalar(2.0));
  ParamSet v;
  v.add("w", Array::scalar(0.5));
  const double analytic = mixed_second_gradient(w * t * t, v, {"t"}).at("t").item();
  EXPECT_DOUBLE_EQ(analytic, 2.0);
  const double h = 1e-4;
  const double fd = ((2 + h) * (2 + h) * 0.5 - (2 - h) * (2 - h) * 0.5) / (2 * h);
  EXPECT_NEAR(analytic, fd, 1e-8);
}

TEST(MixedSecond, CorrectedSoftmaxPixelMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    const auto r = check::check_mixed_second(seed);
    EXPECT_TRUE(r.passed) << "seed " << seed << " rel err " << r.max_relative_error;
  }
}

TEST(MixedSecond, DirectionShapeMismatchThrows) {
  Graph g;
  Var w = g.param("w", Array({2, 2}, 1.0));
  Var t = g.param("t", Array::scalar(2.0));
  ParamSet v;
  v.add("w", Array({3, 2}, 1.0));
  EXPECT_THROW(mixed_second_gradient(sum(w) * t, v, {"t"}), GraphError);
}

TEST(Graph, ParentsPrecedeChildren) {
  Graph g;
  Var x = g.param("x", Array::scalar(1.5));
  Var t = g.param("t", Array::scalar(0.5));
  ParamSet v;
  v.add("x", Array::scalar(1.0));
  mixed_second_gradient(sigmoid(x * t) * x, v, {"t"});
  for (std::size_t i = 0; i < g.node_count(); ++i)
    for (int p : g.node(static_cast<int>(i)).parents) EXPECT_LT(p, static_cast<int>(i));
}

TEST(ParamSetTest, NamesAreUniqueAndShapesFixed) {
  ParamSet p;
  p.add("a", Array({2, 2}));
  EXPECT_THROW(p.add("a", Array({2, 2})), std::invalid_argument);
  EXPECT_THROW(p.set("a", Array({1, 2})), ShapeError);
  EXPECT_THROW(Array({2, 2}, std::vector<double>{1.0}), ShapeError);
}

}  // namespace
}  // namespace metacorr::ad
