#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "kanet/errors.hpp"

namespace kanet {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles with an explicit shape.
///
/// Tensors are plain values: copying copies the data. No broadcasting is
/// performed by any operation except tensor-scalar arithmetic.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// 2-D tensor from nested rows; all rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Same data viewed under a new shape with equal element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(double value);

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double scalar);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double scalar);
Tensor operator*(double scalar, Tensor a);

/// Throws NumericError naming `what` and the first offending index.
void require_finite(const Tensor& t, const std::string& what);

void require_shape(const Tensor& t, const Shape& expected, const std::string& what);

Tensor transpose(const Tensor& m);

/// Matrix product of [M x K] and [K x P].
Tensor matmul(const Tensor& a, const Tensor& b);

struct MatmulGrads {
  Tensor da;
  Tensor db;
};

/// dA = dY * B^T, dB = A^T * dY.
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dy);

double sigmoid(double x);
double silu(double x);
double silu_derivative(double x);

Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& dy);

double max_abs_difference(const Tensor& a, const Tensor& b);

/// Concatenate tensors of shape [B, C_i, ...] along axis 1.
Tensor concat_channels(std::span<const Tensor* const> parts);

/// Inverse of concat_channels: split [B, sum(C_i), ...] into parts with the given channel counts.
std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::size_t> channels);

}  // namespace kanet
