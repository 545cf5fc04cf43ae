#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "metacorr/autodiff/graph.hpp"

namespace metacorr::ntm {

inline constexpr double kLogFloor = 1e-12;

// T[j][k] = p(noisy = k | clean = j), one matrix per supervision level.
struct NoiseTransitionMatrix {
  ad::Array T;
  int level = 0;
};

ad::Array identity_init(std::size_t classes);

// probs (N x C) times T (C x C). Throws ad::ShapeError on a dimension mismatch.
ad::Array corrected_posterior(const ad::Array& probs, const ad::Array& T);
ad::Var corrected_posterior(ad::Var probs, ad::Var T);

struct LossDiagnostics {
  std::size_t floored = 0;  // labeled entries whose corrected posterior hit the log floor
};

// Mean over pixels of -log(max((probs T)[i, label_i], 1e-12)). With a mask,
// only pixels with a nonzero mask entry count and the mean is over them.
ad::Var corrected_loss(ad::Var probs, const std::shared_ptr<const std::vector<int>>& labels,
                       ad::Var T, LossDiagnostics* diagnostics = nullptr,
                       const ad::Array* mask = nullptr);

// Clamp at 0, then divide each row by its sum. A row with no positive entry
// becomes the identity row; `fallbacks` counts those rows.
ad::Array project_row_stochastic(const ad::Array& raw, std::size_t* fallbacks = nullptr);

bool is_row_stochastic(const ad::Array& T, double tolerance = 1e-9);

}  // namespace metacorr::ntm
