#pragma once

#include "kanet/layer.hpp"

namespace kanet {

/// Per-channel batch normalization over [B, C, ...] tensors.
class BatchNorm {
 public:
  static constexpr double kDefaultEpsilon = 1e-5;
  static constexpr double kDefaultMomentum = 0.1;

  explicit BatchNorm(std::size_t channels, double epsilon = kDefaultEpsilon, double momentum = kDefaultMomentum);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);

  std::size_t channels() const { return gamma_.value.size(); }
  std::vector<Parameter*> parameters() { return {&gamma_, &beta_}; }
  void visit_state(const std::string& prefix, const StateVisitor& visit);

  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }

 private:
  Parameter gamma_;
  Parameter beta_;
  Tensor running_mean_;
  Tensor running_var_;
  double epsilon_;
  double momentum_;

  // forward cache
  Shape input_shape_;
  Tensor normalized_;
  std::vector<double> inv_std_;
  bool batch_statistics_ = false;
};

}  // namespace kanet
