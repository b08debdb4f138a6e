#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cade {

/// Base class for every error the library reports. Messages name the
/// offending operation, field or key.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles. Every dimension is positive and the
/// value count always equals the product of the shape.
class Tensor {
 public:
  Tensor() : shape_{1}, values_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor vector(std::initializer_list<double> v) { return vector(std::vector<double>(v)); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return values_.size(); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  const double* data() const { return values_.data(); }
  double* data() { return values_.data(); }
  const std::vector<double>& storage() const { return values_; }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  /// Value of a size-1 tensor.
  double item() const;

  bool all_finite() const;
  /// Same values, new shape of equal size.
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// Largest |a_i - b_i| / max(floor, |a_i|, |b_i|).
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1.0);

}  // namespace cade
