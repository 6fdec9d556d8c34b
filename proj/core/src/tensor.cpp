#include "gradinv/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace gradinv {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values)
    : shape(std::move(s)), data(std::make_shared<std::vector<double>>(std::move(values))) {
  if (numel(shape) != static_cast<std::int64_t>(data->size())) {
    throw ShapeError("tensor: data length " + std::to_string(data->size()) +
                     " does not match shape " + shape_str(shape));
  }
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
  }
}

Tensor Tensor::zeros(Shape s) {
  std::int64_t n = numel(s);
  return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(Shape s, double value) {
  std::int64_t n = numel(s);
  return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

double Tensor::scalar_value() const {
  if (!is_scalar()) throw ShapeError("scalar_value on tensor of shape " + shape_str(shape));
  return (*data)[0];
}

Tensor Tensor::detached_copy() const {
  Tensor out;
  out.shape = shape;
  out.data = std::make_shared<std::vector<double>>(*data);
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  }
}

bool all_finite(const Tensor& t) {
  for (double v : *t.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : *t.data) m = std::max(m, std::fabs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) return false;
  return std::memcmp(a.ptr(), b.ptr(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace gradinv
