#include "metacorr/autodiff/array.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace metacorr::ad {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

using RowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

Array::Array(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

Array::Array(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != product(shape_)) {
    throw ShapeError("array data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

Array Array::matrix(std::size_t rows, std::size_t cols,
                    std::initializer_list<double> values) {
  return Array({rows, cols}, std::vector<double>(values));
}

Array Array::identity(std::size_t n) {
  Array out({n, n});
  for (std::size_t i = 0; i < n; ++i) out.at(i, i) = 1.0;
  return out;
}

std::size_t Array::rows() const {
  if (shape_.size() != 2) throw ShapeError("rows() on non-matrix " + shape_string(shape_));
  return shape_[0];
}

std::size_t Array::cols() const {
  if (shape_.size() != 2) throw ShapeError("cols() on non-matrix " + shape_string(shape_));
  return shape_[1];
}

double Array::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on array of shape " + shape_string(shape_));
  }
  return data_[0];
}

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Array matmul(const Array& a, const Array& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  Array out({a.rows(), b.cols()});
  Eigen::Map<const RowMajor> ma(a.data().data(), a.rows(), a.cols());
  Eigen::Map<const RowMajor> mb(b.data().data(), b.rows(), b.cols());
  Eigen::Map<RowMajor> mo(out.data().data(), out.rows(), out.cols());
  mo.noalias() = ma * mb;
  return out;
}

Array transpose(const Array& a) {
  Array out({a.cols(), a.rows()});
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out.at(c, r) = a.at(r, c);
  return out;
}

Array softmax_rows(const Array& a) {
  Array out(a.shape());
  const std::size_t n = a.rows(), k = a.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const double* in = a.data().data() + r * k;
    double* o = out.data().data() + r * k;
    const double mx = *std::max_element(in, in + k);
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < k; ++c) o[c] /= total;
  }
  return out;
}

}  // namespace metacorr::ad
