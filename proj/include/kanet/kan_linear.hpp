#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kanet/bspline.hpp"
#include "kanet/layer.hpp"

namespace kanet {

enum class BaseActivation { silu, identity };

/// Which input features share a knot grid: none, consecutive runs of
/// `grid_group` features, or all of them.
enum class GridSharing { per_feature, per_group, per_layer };

struct KanLinearOptions {
  int grid_size = 5;
  int spline_order = 3;
  double noise_scale = 0.1;
  BaseActivation base_activation = BaseActivation::silu;
  GridSharing grid_sharing = GridSharing::per_feature;
  /// Features per shared grid under per_group.
  std::size_t grid_group = 1;
  double grid_lo = -1.0;
  double grid_hi = 1.0;
};

struct GridUpdateConfig {
  /// Fusion ratio: weight of the uniform grid against the quantile grid.
  double epsilon = 0.02;
  /// Boundary margin added around the observed range by the uniform grid.
  double margin = 0.01;
  double refit_ridge = 0.0;

  void validate() const;
};

/// Base activation and basis values of many scalar inputs, each evaluated on
/// the grid of one feature. Entry i always spans coefficients [start[i], start[i] + stride),
/// zero-padded where fewer basis functions are active, so kernels run a fixed trip count.
struct BasisTable {
  std::size_t stride = 0;  // spline order + 1
  std::vector<double> act;
  std::vector<double> dact;
  std::vector<std::uint32_t> start;
  std::vector<double> values;  // size() x stride
  std::vector<double> derivs;  // size() x stride, empty without derivatives

  std::size_t size() const { return act.size(); }
};

/// Layer of learnable edge activations
///
///   y[b, o] = sum_j  w_b[o, j] * base(x[b, j]) + w_s[o, j] * sum_i c[o, j, i] * B_i(x[b, j])
///
/// with one knot grid per input feature shared by all outgoing edges.
/// Knot grids are state, not parameters: they only change through update_grid.
class KanLinear {
 public:
  /// Seeded initialization: w_b uniform in +-1/sqrt(in), w_s = 1, grids uniform
  /// on [grid_lo, grid_hi], and c the least-squares fit of noise_scale-scaled
  /// random values at the base grid points.
  KanLinear(std::size_t in_features, std::size_t out_features, const KanLinearOptions& options, std::uint64_t seed);

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const KanLinearOptions& options() const { return options_; }
  std::size_t basis_count() const { return static_cast<std::size_t>(options_.grid_size + options_.spline_order); }
  std::size_t knot_count() const { return basis_count() + static_cast<std::size_t>(options_.spline_order) + 1; }

  /// x: [B, in] -> [B, out]. The input is cached for backward.
  Tensor forward(const Tensor& x, Mode mode = Mode::train);

  /// Accumulates gradients for w_b, w_s and c; returns dL/dx.
  Tensor backward(const Tensor& dy);

  /// Evaluates x[i] on the grid of feature[i] (base activation, basis values and, optionally, derivatives).
  BasisTable tabulate(std::span<const double> x, std::span<const std::uint32_t> feature, bool with_derivatives) const;

  /// Forward where input (b, j) is entry index[b * in + j] of a table built
  /// with feature j's grid. Lets callers share evaluations between inputs.
  Tensor forward_indexed(const BasisTable& table, std::span<const std::uint32_t> index, std::size_t rows) const;

  /// Backward of forward_indexed (the table needs derivatives). Accumulates
  /// parameter gradients and returns dL/d(value) per table entry.
  std::vector<double> backward_indexed(const BasisTable& table, std::span<const std::uint32_t> index,
                                       const Tensor& dy);

  /// First feature of the grid-sharing group containing `feature`.
  std::size_t grid_owner(std::size_t feature) const;

  /// Spline branch only (w_s * sum c B), [B, out].
  Tensor spline_branch(const Tensor& x) const;

  /// Moves every grid toward the quantiles of x ([B, in], B >= G + 1) and
  /// re-fits c so the spline branch reproduces its previous values on x.
  void update_grid(const Tensor& x, const GridUpdateConfig& config);

  SplineGrid grid(std::size_t feature) const;
  /// Sets the grid of every feature in the sharing group of `feature`.
  void set_grid(std::size_t feature, const SplineGrid& grid);
  /// [in, G + 2k + 1] knot table.
  const Tensor& knots() const { return knots_; }

  Parameter& base_weight() { return base_weight_; }
  Parameter& spline_weight() { return spline_weight_; }
  Parameter& spline_scaler() { return spline_scaler_; }
  const Parameter& base_weight() const { return base_weight_; }
  const Parameter& spline_weight() const { return spline_weight_; }
  const Parameter& spline_scaler() const { return spline_scaler_; }

  std::vector<Parameter*> parameters() { return {&base_weight_, &spline_weight_, &spline_scaler_}; }
  void visit_state(const std::string& prefix, const StateVisitor& visit);

  /// out * in * (G + k + 2).
  std::size_t parameter_count() const { return out_ * in_ * (basis_count() + 2); }

 private:
  struct FeatureEval;
  void evaluate_feature(std::size_t j, double x, FeatureEval& f, bool with_derivative) const;

  std::size_t in_;
  std::size_t out_;
  KanLinearOptions options_;
  Parameter base_weight_;    // [out, in]
  Parameter spline_weight_;  // [out, in, G + k]
  Parameter spline_scaler_;  // [out, in]
  Tensor knots_;             // [in, G + 2k + 1]
  Tensor input_;             // forward cache
};

}  // namespace kanet
