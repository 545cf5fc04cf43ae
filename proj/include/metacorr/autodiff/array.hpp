#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace metacorr::ad {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major array of doubles. Graph operations work on rank-2 arrays;
// a scalar is a 1x1 matrix.
class Array {
 public:
  Array() = default;
  explicit Array(std::vector<std::size_t> shape, double fill = 0.0);
  Array(std::vector<std::size_t> shape, std::vector<double> data);

  static Array scalar(double value) { return Array({1, 1}, value); }
  static Array matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values);
  static Array zeros_like(const Array& other) { return Array(other.shape_); }
  static Array identity(std::size_t n);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  // Value of a 1x1 array.
  double item() const;

  bool same_shape(const Array& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  friend bool operator==(const Array& a, const Array& b) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// Dense kernels shared by the graph and by non-differentiated code paths.
Array matmul(const Array& a, const Array& b);
Array transpose(const Array& a);
Array softmax_rows(const Array& a);

}  // namespace metacorr::ad
