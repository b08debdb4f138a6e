#include "cade/tensor.hpp"

#include <algorithm>
#include <cmath>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace cade {

namespace {
#ifdef __GLIBC__
// Activation tensors are a few MB and are freed and reallocated every step.
// Serving them from mmap costs a page fault per 4 KiB on each allocation, so
// keep them on the heap and let freed memory be reused.
const bool heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif
}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

static void check_shape(const Shape& shape) {
  if (shape.empty()) throw Error("tensor shape must have at least one dimension");
  for (auto d : shape)
    if (d == 0) throw Error("tensor shape " + shape_str(shape) + " has a zero dimension");
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  values_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  check_shape(shape_);
  if (values_.size() != shape_size(shape_))
    throw Error("tensor of shape " + shape_str(shape_) + " given " +
                std::to_string(values_.size()) + " values");
}

Tensor Tensor::vector(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

double Tensor::item() const {
  if (values_.size() != 1) throw Error("item() on tensor of shape " + shape_str(shape_));
  return values_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size())
    throw Error("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), values_);
}

double max_relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape())
    throw Error("max_relative_error: shapes " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double scale = std::max({floor, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace cade
