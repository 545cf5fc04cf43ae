#include "metacorr/ntm/transition.hpp"

#include <cmath>
#include <stdexcept>

#include "metacorr/models/networks.hpp"

namespace metacorr::ntm {

namespace {

void check_pair(const ad::Array& probs, const ad::Array& T) {
  if (T.rank() != 2 || T.rows() != T.cols())
    throw ad::ShapeError("transition matrix must be square, got " + ad::shape_string(T.shape()));
  if (probs.rank() != 2 || probs.cols() != T.rows())
    throw ad::ShapeError("posterior " + ad::shape_string(probs.shape()) +
                         " does not match transition " + ad::shape_string(T.shape()));
}

}  // namespace

ad::Array identity_init(std::size_t classes) {
  if (classes < 2) throw std::invalid_argument("transition matrix needs >= 2 classes");
  return ad::Array::identity(classes);
}

ad::Array corrected_posterior(const ad::Array& probs, const ad::Array& T) {
  check_pair(probs, T);
  return ad::matmul(probs, T);
}

ad::Var corrected_posterior(ad::Var probs, ad::Var T) {
  check_pair(probs.value(), T.value());
  return ad::matmul(probs, T);
}

ad::Var corrected_loss(ad::Var probs, const std::shared_ptr<const std::vector<int>>& labels,
                       ad::Var T, LossDiagnostics* diagnostics, const ad::Array* mask) {
  ad::Var corrected = corrected_posterior(probs, T);
  if (diagnostics) {
    const ad::Array& q = corrected.value();
    for (std::size_t i = 0; i < labels->size(); ++i) {
      if (mask && (*mask)[i] == 0.0) continue;
      if (q.at(i, static_cast<std::size_t>((*labels)[i])) < kLogFloor) ++diagnostics->floored;
    }
  }
  return mask ? models::masked_cross_entropy(corrected, labels, *mask)
              : models::cross_entropy(corrected, labels);
}

ad::Array project_row_stochastic(const ad::Array& raw, std::size_t* fallbacks) {
  if (raw.rank() != 2 || raw.rows() != raw.cols())
    throw ad::ShapeError("projection expects a square matrix, got " + ad::shape_string(raw.shape()));
  ad::Array out = raw;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < out.cols(); ++c) {
      double& v = out.at(r, c);
      v = v > 0.0 ? v : 0.0;
      total += v;
    }
    if (!(total > 0.0) || !std::isfinite(total)) {
      for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) = r == c ? 1.0 : 0.0;
      if (fallbacks) ++*fallbacks;
      continue;
    }
    for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) /= total;
  }
  return out;
}

bool is_row_stochastic(const ad::Array& T, double tolerance) {
  if (T.rank() != 2 || T.rows() != T.cols()) return false;
  for (std::size_t r = 0; r < T.rows(); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < T.cols(); ++c) {
      const double v = T.at(r, c);
      if (!(v >= 0.0 && v <= 1.0)) return false;
      total += v;
    }
    if (std::abs(total - 1.0) > tolerance) return false;
  }
  return true;
}

}  // namespace metacorr::ntm
