#pragma once

#include <functional>
#include <string>
#include <vector>

#include "kanet/tensor.hpp"

namespace kanet {

enum class Mode {
  train,      // batch statistics, running statistics updated
  eval,       // running statistics
  calibrate,  // batch statistics, running statistics untouched (grid updates)
};

enum class ParamKind { weight, spline_coefficients };

/// Trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  ParamKind kind = ParamKind::weight;

  Parameter() = default;
  Parameter(std::string name_, Tensor value_, ParamKind kind_ = ParamKind::weight)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape()), kind(kind_) {}

  void zero_grad() { grad.fill(0.0); }
};

/// Visits every named tensor that makes up a layer's persistent state
/// (parameters and buffers such as running statistics or knot grids).
using StateVisitor = std::function<void(const std::string& name, Tensor& tensor)>;

}  // namespace kanet
