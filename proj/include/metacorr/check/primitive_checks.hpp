#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metacorr/autodiff/graph.hpp"

namespace metacorr::check {

struct CheckResult {
  std::string name;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string worst_entry;
};

struct FaultInjection {
  ad::OpKind kind;
  double scale = 1.5;
};

// Finite-difference check of every differentiable primitive on random inputs
// in [-2, 2] (positive inputs for log/reciprocal). Each check differentiates
// sum(f(x) * R) for a fixed random R.
std::vector<CheckResult> check_primitives(std::uint64_t seed, double step = 1e-4,
                                          double tolerance = 1e-5,
                                          std::optional<FaultInjection> fault = {});

// Second-order check: mixed_second_gradient against central differences of
// (grad_w loss) . v over the T entries.
CheckResult check_mixed_second(std::uint64_t seed, double step = 1e-4,
                               double tolerance = 1e-3);

}  // namespace metacorr::check
