#include "kanet/batch_norm.hpp"

#include <cmath>

namespace kanet {

BatchNorm::BatchNorm(std::size_t channels, double epsilon, double momentum)
    : gamma_("gamma", Tensor({channels}, 1.0)),
      beta_("beta", Tensor({channels}, 0.0)),
      running_mean_({channels}, 0.0),
      running_var_({channels}, 1.0),
      epsilon_(epsilon),
      momentum_(momentum) {}

void BatchNorm::visit_state(const std::string& prefix, const StateVisitor& visit) {
  visit(prefix + "gamma", gamma_.value);
  visit(prefix + "beta", beta_.value);
  visit(prefix + "running_mean", running_mean_);
  visit(prefix + "running_var", running_var_);
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  const std::size_t c_count = channels();
  if (x.rank() < 2 || x.extent(1) != c_count) {
    throw DimensionError("batch_norm: input " + shape_string(x.shape()) + " does not have " +
                         std::to_string(c_count) + " channels");
  }
  const std::size_t batch = x.extent(0);
  const std::size_t inner = x.size() / (batch * c_count);
  const std::size_t count = batch * inner;

  input_shape_ = x.shape();
  batch_statistics_ = mode != Mode::eval;
  normalized_ = Tensor(x.shape());
  inv_std_.assign(c_count, 0.0);
  Tensor out(x.shape());

  for (std::size_t c = 0; c < c_count; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (batch_statistics_) {
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = x.data().data() + (b * c_count + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) mean += p[i];
      }
      mean /= static_cast<double>(count);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = x.data().data() + (b * c_count + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= static_cast<double>(count);
      if (mode == Mode::train) {
        const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
        running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean;
        running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * unbiased;
      }
    } else {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + epsilon_);
    inv_std_[c] = inv_std;
    const double g = gamma_.value[c], bta = beta_.value[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * c_count + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double xh = (x[base + i] - mean) * inv_std;
        normalized_[base + i] = xh;
        out[base + i] = g * xh + bta;
      }
    }
  }
  require_finite(out, "batch_norm");
  return out;
}

Tensor BatchNorm::backward(const Tensor& dy) {
  require_shape(dy, input_shape_, "batch_norm backward");
  const std::size_t c_count = channels();
  const std::size_t batch = input_shape_[0];
  const std::size_t inner = dy.size() / (batch * c_count);
  const double count = static_cast<double>(batch * inner);
  Tensor dx(input_shape_);

  for (std::size_t c = 0; c < c_count; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xh = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * c_count + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        sum_dy += dy[base + i];
        sum_dy_xh += dy[base + i] * normalized_[base + i];
      }
    }
    gamma_.grad[c] += sum_dy_xh;
    beta_.grad[c] += sum_dy;
    const double g = gamma_.value[c];
    const double inv_std = inv_std_[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * c_count + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        if (batch_statistics_) {
          dx[base + i] = g * inv_std / count *
                         (count * dy[base + i] - sum_dy - normalized_[base + i] * sum_dy_xh);
        } else {
          dx[base + i] = g * inv_std * dy[base + i];
        }
      }
    }
  }
  return dx;
}

}  // namespace kanet
