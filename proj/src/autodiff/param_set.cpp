#include "metacorr/autodiff/param_set.hpp"

#include <cstring>

namespace metacorr::ad {

void ParamSet::add(const std::string& name, Array value) {
  auto [it, inserted] = items_.emplace(name, std::move(value));
  if (!inserted) throw std::invalid_argument("duplicate parameter '" + name + "'");
}

void ParamSet::set(const std::string& name, Array value) {
  Array& slot = mutable_at(name);
  if (!slot.same_shape(value)) {
    throw ShapeError("parameter '" + name + "' has shape " +
                     shape_string(slot.shape()) + ", got " +
                     shape_string(value.shape()));
  }
  slot = std::move(value);
}

const Array& ParamSet::at(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

Array& ParamSet::mutable_at(const std::string& name) {
  auto it = items_.find(name);
  if (it == items_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& [name, _] : items_) out.push_back(name);
  return out;
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, a] : items_) n += a.size();
  return n;
}

ParamSet ParamSet::subset(const std::string& prefix) const {
  ParamSet out;
  for (const auto& [name, a] : items_)
    if (name.rfind(prefix, 0) == 0) out.add(name, a);
  return out;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, a] : items_) out.add(name, Array::zeros_like(a));
  return out;
}

void ParamSet::axpy(double scale, const ParamSet& other) {
  for (const auto& [name, a] : other.items_) {
    Array& dst = mutable_at(name);
    if (!dst.same_shape(a)) throw ShapeError("axpy shape mismatch on '" + name + "'");
    for (std::size_t i = 0; i < a.size(); ++i) dst[i] += scale * a[i];
  }
}

double ParamSet::dot(const ParamSet& other) const {
  double total = 0.0;
  for (const auto& [name, a] : items_) {
    const Array& b = other.at(name);
    if (!a.same_shape(b)) throw ShapeError("dot shape mismatch on '" + name + "'");
    for (std::size_t i = 0; i < a.size(); ++i) total += a[i] * b[i];
  }
  return total;
}

std::uint64_t ParamSet::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, a] : items_) {
    mix(name.data(), name.size());
    for (std::size_t d : a.shape()) mix(&d, sizeof d);
    mix(a.data().data(), a.size() * sizeof(double));
  }
  return h;
}

}  // namespace metacorr::ad
