#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kanet/layer.hpp"
#include "kanet/tensor.hpp"

namespace kanet {

/// Stateless operation with an explicit backward rule.
struct DifferentiableOp {
  std::string name;
  std::function<Tensor(const std::vector<Tensor>& inputs)> forward;
  /// Returns one gradient per input, shaped like that input.
  std::function<std::vector<Tensor>(const std::vector<Tensor>& inputs, const Tensor& upstream)> backward;
};

/// Anything checkable: a set of tensors that are perturbed in place, a
/// forward that reads them, and a backward that yields one gradient per tensor.
struct GradCheckTarget {
  std::vector<Tensor*> variables;
  std::vector<std::string> names;
  std::function<Tensor()> forward;
  std::function<std::vector<Tensor>(const Tensor& upstream)> backward;
};

struct GradCheckOptions {
  double perturbation = 1e-5;
  std::uint64_t seed = 0;
  /// Above this many coordinates a seeded random subsample of this size is checked.
  std::size_t max_coordinates = 10000;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_coordinate;
  std::size_t coordinates_checked = 0;
};

/// Compares the analytic gradient of L = sum(forward() * R), R a seeded random
/// projection, against central differences. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8). Throws NumericError on non-finite gradients.
GradCheckResult grad_check(const GradCheckTarget& target, const GradCheckOptions& options = {});

GradCheckResult grad_check(const DifferentiableOp& op, std::vector<Tensor> inputs,
                           const GradCheckOptions& options = {});

/// Builds a target for a layer exposing forward(x, mode), backward(dy) and parameters().
template <typename LayerT>
GradCheckTarget layer_target(LayerT& layer, Tensor& input, Mode mode = Mode::train) {
  GradCheckTarget target;
  target.variables.push_back(&input);
  target.names.emplace_back("input");
  std::vector<Parameter*> params = layer.parameters();
  for (Parameter* p : params) {
    target.variables.push_back(&p->value);
    target.names.push_back(p->name);
  }
  target.forward = [&layer, &input, mode] { return layer.forward(input, mode); };
  target.backward = [&layer, params](const Tensor& upstream) {
    for (Parameter* p : params) p->zero_grad();
    std::vector<Tensor> grads;
    grads.push_back(layer.backward(upstream));
    for (Parameter* p : params) grads.push_back(p->grad);
    return grads;
  };
  return target;
}

DifferentiableOp matmul_op();
DifferentiableOp silu_op();

}  // namespace kanet
