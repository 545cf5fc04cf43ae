#include "metacorr/check/finite_difference.hpp"

#include <algorithm>
#include <cmath>

namespace metacorr::check {

ad::ParamSet central_difference(const ScalarFunction& f, const ad::ParamSet& at,
                                const std::vector<std::string>& names, double step) {
  ad::ParamSet out;
  ad::ParamSet probe = at;
  for (const auto& name : names.empty() ? at.names() : names) {
    const ad::Array& base = at.at(name);
    ad::Array slope = ad::Array::zeros_like(base);
    for (std::size_t i = 0; i < base.size(); ++i) {
      probe.mutable_at(name)[i] = base[i] + step;
      const double up = f(probe);
      probe.mutable_at(name)[i] = base[i] - step;
      const double down = f(probe);
      probe.mutable_at(name)[i] = base[i];
      slope[i] = (up - down) / (2.0 * step);
    }
    out.add(name, std::move(slope));
  }
  return out;
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

Discrepancy compare(const ad::ParamSet& analytic, const ad::ParamSet& numeric,
                    double floor) {
  Discrepancy d;
  for (const auto& [name, num] : numeric) {
    const ad::Array& ana = analytic.at(name);
    if (!ana.same_shape(num)) throw ad::ShapeError("compare: shape mismatch on '" + name + "'");
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double e = relative_error(ana[i], num[i], floor);
      if (d.worst_entry.empty() || e > d.max_relative_error) {
        d.max_relative_error = e;
        d.worst_entry = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return d;
}

}  // namespace metacorr::check
