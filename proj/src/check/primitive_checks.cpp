#include "metacorr/check/primitive_checks.hpp"

#include <cmath>
#include <functional>
#include <memory>

#include "metacorr/check/finite_difference.hpp"
#include "metacorr/rng.hpp"

namespace metacorr::check {

namespace {

using ad::Array;
using ad::Graph;
using ad::OpKind;
using ad::ParamSet;
using ad::Var;

struct PrimitiveCase {
  OpKind kind;
  std::vector<std::size_t> x_shape;
  std::vector<std::size_t> y_shape;  // empty for unary primitives
  double lo = -2.0;
  double hi = 2.0;
  std::function<Var(Var, Var)> op;
};

Array random_array(CounterRng& rng, const std::vector<std::size_t>& shape, double lo,
                   double hi, bool avoid_zero) {
  Array a(shape);
  for (std::size_t i = 0; i < a.size(); ++i) {
    double v = rng.uniform(lo, hi);
    while (avoid_zero && std::abs(v) < 0.05) v = rng.uniform(lo, hi);
    a[i] = v;
  }
  return a;
}

std::vector<PrimitiveCase> primitive_cases() {
  auto labels4 = std::make_shared<const std::vector<int>>(std::vector<int>{2, 0, 1, 2});
  const ad::WindowGeometry geo{2, 3, 4};
  return {
      {OpKind::kAdd, {3, 4}, {3, 4}, -2, 2, [](Var x, Var y) { return x + y; }},
      {OpKind::kSub, {3, 4}, {3, 4}, -2, 2, [](Var x, Var y) { return x - y; }},
      {OpKind::kMul, {3, 4}, {3, 4}, -2, 2, [](Var x, Var y) { return x * y; }},
      {OpKind::kAffine, {3, 4}, {}, -2, 2, [](Var x, Var) { return ad::affine(x, 1.7, -0.3); }},
      {OpKind::kMatMul, {3, 4}, {4, 2}, -2, 2, [](Var x, Var y) { return ad::matmul(x, y); }},
      {OpKind::kTranspose, {3, 4}, {}, -2, 2, [](Var x, Var) { return ad::transpose(x); }},
      {OpKind::kReshape, {3, 4}, {}, -2, 2, [](Var x, Var) { return ad::reshape(x, {2, 6}); }},
      {OpKind::kBroadcastRows, {1, 4}, {}, -2, 2, [](Var x, Var) { return ad::broadcast_rows(x, 5); }},
      {OpKind::kSumRows, {3, 4}, {}, -2, 2, [](Var x, Var) { return ad::sum_rows(x); }},
      {OpKind::kBroadcastCols, {3, 1}, {}, -2, 2, [](Var x, Var) { return ad::broadcast_cols(x, 4); }},
      {OpKind::kRowSum, {3, 4}, {}, -2, 2, [](Var x, Var) { return ad::row_sum(x); }},
      {OpKind::kFill, {1, 1}, {}, -2, 2, [](Var x, Var) { return ad::fill(x, {2, 3}); }},
      {OpKind::kSum, {3, 4}, {}, -2, 2, [](Var x, Var) { return ad::sum(x); }},
      {OpKind::kSoftmax, {3, 4}, {}, -2, 2, [](Var x, Var) { return ad::softmax(x); }},
      {OpKind::kLog, {3, 4}, {}, 0.5, 2, [](Var x, Var) { return ad::log(x); }},
      {OpKind::kReciprocal, {3, 4}, {}, 0.5, 2, [](Var x, Var) { return ad::reciprocal(x); }},
      {OpKind::kGather, {4, 3}, {}, -2, 2, [labels4](Var x, Var) { return ad::gather(x, labels4); }},
      {OpKind::kScatter, {4, 1}, {}, -2, 2, [labels4](Var x, Var) { return ad::scatter(x, labels4, 3); }},
      {OpKind::kLeakyRelu, {3, 4}, {}, -2, 2, [](Var x, Var) { return ad::leaky_relu(x); }},
      {OpKind::kSigmoid, {3, 4}, {}, -2, 2, [](Var x, Var) { return ad::sigmoid(x); }},
      {OpKind::kUnfold, {geo.pixels(), 2}, {}, -2, 2, [geo](Var x, Var) { return ad::unfold3x3(x, geo); }},
      {OpKind::kFold, {geo.pixels(), 18}, {}, -2, 2, [geo](Var x, Var) { return ad::fold3x3(x, geo); }},
  };
}

}  // namespace

std::vector<CheckResult> check_primitives(std::uint64_t seed, double step, double tolerance,
                                          std::optional<FaultInjection> fault) {
  std::vector<CheckResult> results;
  CounterRng root(seed);
  std::uint64_t index = 0;
  for (const PrimitiveCase& c : primitive_cases()) {
    CounterRng rng = root.split(index++);
    const bool kinked = c.kind == OpKind::kLeakyRelu;
    ParamSet leaves;
    leaves.add("x", random_array(rng, c.x_shape, c.lo, c.hi, kinked));
    if (!c.y_shape.empty()) leaves.add("y", random_array(rng, c.y_shape, c.lo, c.hi, false));

    Graph g;
    if (fault) g.inject_backward_fault(fault->kind, fault->scale);
    auto vars = g.bind(leaves);
    Var y = c.y_shape.empty() ? Var() : vars.at("y");
    Var out = c.op(vars.at("x"), y);
    Var weights = g.constant(random_array(rng, out.shape(), -2.0, 2.0, false), "projection");
    Var loss = ad::sum(out * weights);

    const ParamSet analytic = g.gradient(loss);
    const ParamSet numeric = central_difference(
        [&](const ParamSet& p) { return g.forward(p, loss).item(); }, leaves,
        leaves.names(), step);
    const Discrepancy d = compare(analytic, numeric);
    results.push_back({std::string(ad::op_name(c.kind)), d.max_relative_error, tolerance,
                       d.max_relative_error <= tolerance, d.worst_entry});
  }
  return results;
}

CheckResult check_mixed_second(std::uint64_t seed, double step, double tolerance) {
  CounterRng rng = CounterRng(seed).split("mixed_second");
  ParamSet point;
  point.add("w", random_array(rng, {4, 3}, -1.0, 1.0, false));
  Array t({3, 3});
  for (std::size_t r = 0; r < 3; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) total += (t.at(r, c) = rng.uniform(0.1, 1.0));
    for (std::size_t c = 0; c < 3; ++c) t.at(r, c) /= total;
  }
  point.add("T", t);
  const Array x = random_array(rng, {1, 4}, -2.0, 2.0, false);
  ParamSet direction;
  direction.add("w", random_array(rng, {4, 3}, -1.0, 1.0, false));
  auto label = std::make_shared<const std::vector<int>>(std::vector<int>{1});

  auto build = [&](Graph& g, const ParamSet& p) {
    auto vars = g.bind(p);
    Var probs = ad::softmax(ad::matmul(g.constant(x), vars.at("w")));
    Var noisy = ad::matmul(probs, vars.at("T"));
    return ad::scale(ad::log(ad::gather(noisy, label)), -1.0);
  };

  Graph g;
  Var loss = build(g, point);
  const ParamSet analytic = ad::mixed_second_gradient(loss, direction, {"T"});
  const ParamSet numeric = central_difference(
      [&](const ParamSet& p) {
        Graph fresh;
        Var l = build(fresh, p);
        return fresh.gradient(l, {"w"}).dot(direction);
      },
      point, {"T"}, step);
  const Discrepancy d = compare(analytic, numeric);
  return {"mixed_second_gradient", d.max_relative_error, tolerance,
          d.max_relative_error <= tolerance, d.worst_entry};
}

}  // namespace metacorr::check
