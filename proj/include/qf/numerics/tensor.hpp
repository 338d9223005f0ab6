#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qf {

/// Raised whenever operand shapes do not fit the contract of a kernel.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major f64 array paired with a gradient accumulator of the same shape.
class DualTensor {
 public:
  DualTensor() = default;
  explicit DualTensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)),
        values_(element_count(shape_), fill),
        grad_(values_.size(), 0.0) {}
  DualTensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != element_count(shape_))
      throw ShapeError("DualTensor: " + std::to_string(values_.size()) + " values for shape " + to_string(shape_));
    grad_.assign(values_.size(), 0.0);
  }

  static DualTensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return DualTensor({rows, cols}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }

  /// Rows/cols view a rank-1 tensor as a single row.
  std::size_t rows() const { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const {
    if (shape_.empty()) return 1;
    return shape_.size() >= 2 ? values_.size() / shape_[0] : shape_[0];
  }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& grad() { return grad_; }
  const std::vector<double>& grad() const { return grad_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

  /// Reinterprets the same values under a new shape with equal element count.
  void reshape(Shape s) {
    if (element_count(s) != values_.size())
      throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(s));
    shape_ = std::move(s);
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  Shape shape_;
  std::vector<double> values_;
  std::vector<double> grad_;
};

}  // namespace qf
