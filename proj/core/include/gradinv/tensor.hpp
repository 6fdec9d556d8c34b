#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradinv {

/// Base class for all structured errors thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes. The message names both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value violates an operation's contract (label out of range,
/// zero-norm vector, degenerate objective, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or diverging optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment configuration. The message carries the key path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File format or I/O failure.
class IoError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense n-dimensional array of 64-bit floats. A Tensor is either a plain
/// value (node < 0) or a handle into a computation graph (node >= 0,
/// graph_id identifies the owning graph). Data is shared between handles.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::int32_t node = -1;
  std::uint64_t graph_id = 0;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double value);
  static Tensor scalar(double value);

  std::int64_t size() const { return data ? static_cast<std::int64_t>(data->size()) : 0; }
  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }
  double& operator[](std::int64_t i) { return (*data)[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return (*data)[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool is_scalar() const { return size() == 1; }
  double scalar_value() const;

  /// Deep copy with no graph binding.
  Tensor detached_copy() const;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

bool all_finite(const Tensor& t);
double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace gradinv
