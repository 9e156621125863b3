#include "kanet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace kanet {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n_rows = rows.size();
  const std::size_t n_cols = n_rows ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(n_rows * n_cols);
  for (const auto& row : rows) {
    if (row.size() != n_cols) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({n_rows, n_cols}, std::move(data));
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  }
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw DimensionError("add: " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw DimensionError("subtract: " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double scalar) {
  for (double& v : data_) v *= scalar;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double scalar) { return a *= scalar; }
Tensor operator*(double scalar, Tensor a) { return a *= scalar; }

void require_finite(const Tensor& t, const std::string& what) {
  const auto values = t.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(what + ": non-finite value " + std::to_string(values[i]) + " at flat index " +
                         std::to_string(i) + " of " + shape_string(t.shape()));
    }
  }
}

void require_shape(const Tensor& t, const Shape& expected, const std::string& what) {
  if (t.shape() != expected) {
    throw DimensionError(what + ": expected shape " + shape_string(expected) + ", got " + shape_string(t.shape()));
  }
}

Tensor transpose(const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("transpose needs a matrix, got " + shape_string(m.shape()));
  const std::size_t rows = m.extent(0), cols = m.extent(1);
  Tensor out({cols, rows});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(c, r) = m.at(r, c);
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), p = b.extent(1);
  Tensor out({m, p});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = po + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = pa[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = pb + kk * p;
      for (std::size_t j = 0; j < p; ++j) row[j] += aik * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dy) {
  require_shape(dy, {a.extent(0), b.extent(1)}, "matmul_backward upstream");
  return {matmul(dy, transpose(b)), matmul(transpose(a), dy)};
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

double silu_derivative(double x) {
  const double s = sigmoid(x);
  return s + x * s * (1.0 - s);
}

Tensor silu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = silu(x[i]);
  require_finite(out, "silu");
  return out;
}

Tensor silu_backward(const Tensor& x, const Tensor& dy) {
  require_shape(dy, x.shape(), "silu_backward upstream");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * silu_derivative(x[i]);
  return dx;
}

double max_abs_difference(const Tensor& a, const Tensor& b) {
  require_shape(b, a.shape(), "max_abs_difference");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

Tensor concat_channels(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  const Tensor& first = *parts.front();
  if (first.rank() < 2) throw DimensionError("concat_channels: rank < 2");
  const std::size_t batch = first.extent(0);
  const std::size_t inner = first.size() / std::max<std::size_t>(1, batch * first.extent(1));
  std::size_t channels = 0;
  for (const Tensor* p : parts) {
    if (p->rank() != first.rank() || p->extent(0) != batch ||
        !std::equal(p->shape().begin() + 2, p->shape().end(), first.shape().begin() + 2)) {
      throw DimensionError("concat_channels: " + shape_string(p->shape()) + " incompatible with " +
                           shape_string(first.shape()));
    }
    channels += p->extent(1);
  }
  Shape shape = first.shape();
  shape[1] = channels;
  Tensor out(shape);
  double* dst = out.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (const Tensor* p : parts) {
      const std::size_t n = p->extent(1) * inner;
      std::copy_n(p->data().data() + b * n, n, dst);
      dst += n;
    }
  }
  return out;
}

std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::size_t> channels) {
  const std::size_t total = std::accumulate(channels.begin(), channels.end(), std::size_t{0});
  if (x.rank() < 2 || x.extent(1) != total) {
    throw DimensionError("split_channels: " + shape_string(x.shape()) + " does not have " + std::to_string(total) +
                         " channels");
  }
  const std::size_t batch = x.extent(0);
  const std::size_t inner = total ? x.size() / (batch * total) : 0;
  std::vector<Tensor> parts;
  parts.reserve(channels.size());
  for (std::size_t c : channels) {
    Shape shape = x.shape();
    shape[1] = c;
    parts.emplace_back(shape);
  }
  const double* src = x.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const std::size_t n = channels[i] * inner;
      std::copy_n(src, n, parts[i].data().data() + b * n);
      src += n;
    }
  }
  return parts;
}

}  // namespace kanet
