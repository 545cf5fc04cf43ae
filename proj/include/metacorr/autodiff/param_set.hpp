#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "metacorr/autodiff/array.hpp"

namespace metacorr::ad {

// Named parameter arrays. Iteration order is lexicographic by name, which
// keeps every traversal (and every update) deterministic.
class ParamSet {
 public:
  using Map = std::map<std::string, Array>;

  ParamSet() = default;

  // Throws if the name already exists.
  void add(const std::string& name, Array value);
  // Replaces the value of an existing entry; the shape must not change.
  void set(const std::string& name, Array value);

  bool contains(const std::string& name) const { return items_.count(name) > 0; }
  const Array& at(const std::string& name) const;
  Array& mutable_at(const std::string& name);

  std::vector<std::string> names() const;
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::size_t parameter_count() const;

  Map::const_iterator begin() const { return items_.begin(); }
  Map::const_iterator end() const { return items_.end(); }

  // Entries whose name starts with `prefix`.
  ParamSet subset(const std::string& prefix) const;
  // Zero-valued copy with identical names and shapes.
  ParamSet zeros_like() const;

  // this += scale * other, over matching names.
  void axpy(double scale, const ParamSet& other);
  double dot(const ParamSet& other) const;

  // FNV-1a over names, shapes and raw bytes; used to detect mutation.
  std::uint64_t checksum() const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) = default;

 private:
  Map items_;
};

}  // namespace metacorr::ad
