#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metacorr/check/primitive_checks.hpp"

namespace metacorr::check {

// Mean deep-head CE plus 0.1 x shallow-head CE of the default two-head
// network on one 8x8 image, differenced over every weight.
CheckResult check_network(std::uint64_t seed, double step = 1e-4, double tolerance = 1e-4,
                          std::optional<FaultInjection> fault = {});

// Corrected loss with respect to the transition matrix entries.
CheckResult check_corrected_loss(std::uint64_t seed, double step = 1e-4, double tolerance = 1e-4,
                                 std::optional<FaultInjection> fault = {});

// Meta-loss gradient with respect to T0 and T1 on a one-image, four-class
// instance against differences that rerun the virtual step per perturbation.
CheckResult check_meta_gradient(std::uint64_t seed, double step = 1e-4, double tolerance = 1e-3,
                                double virtual_lr = 0.1);

// Every suite above plus the primitive and mixed-second checks.
std::vector<CheckResult> run_all_checks(std::uint64_t seed, std::optional<FaultInjection> fault = {});

// One line per check: name, status, max relative error, tolerance, worst entry.
std::string format_report(const std::vector<CheckResult>& results);

}  // namespace metacorr::check
