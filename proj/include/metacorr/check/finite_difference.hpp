#pragma once

#include <functional>
#include <string>
#include <vector>

#include "metacorr/autodiff/param_set.hpp"

namespace metacorr::check {

using ScalarFunction = std::function<double(const ad::ParamSet&)>;

// Central differences (f(x+h) - f(x-h)) / 2h for every entry of the named
// parameters (all of them when `names` is empty). Uses only function
// evaluations, never a backward pass.
ad::ParamSet central_difference(const ScalarFunction& f, const ad::ParamSet& at,
                                const std::vector<std::string>& names,
                                double step = 1e-4);

// |a - b| / max(|a|, |b|, floor). The floor keeps entries that are zero up to
// rounding from dominating the comparison.
double relative_error(double a, double b, double floor = 1e-6);

struct Discrepancy {
  double max_relative_error = 0.0;
  std::string worst_entry;
};

Discrepancy compare(const ad::ParamSet& analytic, const ad::ParamSet& numeric,
                    double floor = 1e-6);

}  // namespace metacorr::check
