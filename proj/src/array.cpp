#include "mvh/array.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mvh {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

static void check_dims(const Shape& shape) {
  if (shape.empty()) throw ContractError("array shape must have at least one dimension");
  for (auto d : shape)
    if (d == 0) throw ContractError("array dims must be >= 1, got " + shape_str(shape));
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)) {
  check_dims(shape_);
  values_.assign(shape_size(shape_), fill);
}

Array::Array(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  check_dims(shape_);
  if (shape_size(shape_) != values_.size())
    throw ContractError("shape " + shape_str(shape_) + " does not match " + std::to_string(values_.size()) +
                        " values");
}

Array Array::from(std::initializer_list<double> values) {
  return Array(Shape{values.size()}, std::vector<double>(values));
}

std::size_t Array::dim(int i) const {
  const int r = static_cast<int>(shape_.size());
  const int k = i < 0 ? r + i : i;
  if (k < 0 || k >= r) throw ContractError("dim index out of range for shape " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(k)];
}

double Array::item() const {
  if (values_.size() != 1) throw ContractError("item() on array of shape " + shape_str(shape_));
  return values_[0];
}

Array Array::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size())
    throw ContractError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Array(std::move(shape), values_);
}

void Array::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool Array::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace mvh
