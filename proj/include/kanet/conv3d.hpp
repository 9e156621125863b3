#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kanet/kan_linear.hpp"
#include "kanet/layer.hpp"

namespace kanet {

using Extent3 = std::array<std::size_t, 3>;

/// Kernel / stride / padding / dilation of a 3-D sliding window.
struct ConvGeometry {
  Extent3 kernel{3, 3, 3};
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
  Extent3 dilation{1, 1, 1};

  static ConvGeometry cube(std::size_t kernel, std::size_t stride = 1, std::size_t padding = 0,
                           std::size_t dilation = 1);

  std::size_t kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }

  /// floor((D + 2p - d(K - 1) - 1) / s) + 1 per axis; GeometryError if any is < 1.
  Extent3 output_extents(const Extent3& input) const;

  bool operator==(const ConvGeometry&) const = default;
};

/// Spatial extents (axes 2..4) of a [B, C, D, H, W] tensor.
Extent3 spatial_extents(const Tensor& x);

/// [B, C, D, H, W] -> [B, N, C*K1*K2*K3] with N = D'H'W'. Columns are
/// channel-major, then kernel offsets in row-major (kd, kh, kw) order; padding is zero.
Tensor unfold3d(const Tensor& x, const ConvGeometry& geometry);

/// Adjoint of unfold3d: scatter-adds each column back to its source voxel.
Tensor fold3d(const Tensor& columns, const Shape& input_shape, const ConvGeometry& geometry);

/// Cross-correlation with weights [C_out, C, K1, K2, K3] and bias [C_out], via unfold + matmul.
Tensor linear_conv3d(const Tensor& x, const Tensor& weights, const Tensor& bias, const ConvGeometry& geometry);

/// Direct seven-loop evaluation of the same operator.
Tensor linear_conv3d_naive(const Tensor& x, const Tensor& weights, const Tensor& bias, const ConvGeometry& geometry);

struct Conv3dGrads {
  Tensor dx;
  Tensor dweights;
  Tensor dbias;
};

Conv3dGrads linear_conv3d_backward(const Tensor& x, const Tensor& weights, const Tensor& dy,
                                   const ConvGeometry& geometry);

/// Mean over each window; no padding.
Tensor avg_pool3d(const Tensor& x, const Extent3& window, const Extent3& stride);
Tensor avg_pool3d_backward(const Tensor& dy, const Shape& input_shape, const Extent3& window, const Extent3& stride);

/// [B, C, ...] -> [B, C] mean over all trailing axes.
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& dy, const Shape& input_shape);

/// Standard convolution layer with bias.
class Conv3d {
 public:
  Conv3d(std::size_t in_channels, std::size_t out_channels, const ConvGeometry& geometry, std::uint64_t seed);

  Tensor forward(const Tensor& x, Mode mode = Mode::train);
  Tensor backward(const Tensor& dy);

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return out_channels_; }
  const ConvGeometry& geometry() const { return geometry_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

  std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }
  void visit_state(const std::string& prefix, const StateVisitor& visit);
  std::size_t parameter_count() const { return weight_.value.size() + bias_.value.size(); }

 private:
  std::size_t in_channels_;
  std::size_t out_channels_;
  ConvGeometry geometry_;
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
};

/// 3-D convolution whose per-tap linear weights are replaced by KanLinear edges
/// over the unfolded receptive field. No bias.
///
/// With GridSharing::per_group the grids are tied per input channel (the group
/// is the kernel volume); each voxel's basis is then evaluated once instead of
/// once per tap. per_feature keeps a grid per (channel, tap) column.
class KanConv3d {
 public:
  KanConv3d(std::size_t in_channels, std::size_t out_channels, const ConvGeometry& geometry,
            const KanLinearOptions& options, std::uint64_t seed);

  Tensor forward(const Tensor& x, Mode mode = Mode::train);
  Tensor backward(const Tensor& dy);

  /// Grid update from the unfolded rows of x, subsampled (seeded) to at most max_rows.
  void update_grid(const Tensor& x, const GridUpdateConfig& config, std::size_t max_rows, std::uint64_t seed);

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return out_channels_; }
  const ConvGeometry& geometry() const { return geometry_; }
  KanLinear& inner() { return inner_; }
  const KanLinear& inner() const { return inner_; }

  std::vector<Parameter*> parameters() { return inner_.parameters(); }
  void visit_state(const std::string& prefix, const StateVisitor& visit) { inner_.visit_state(prefix, visit); }
  /// C_out * C * K1 * K2 * K3 * (G + k + 2).
  std::size_t parameter_count() const { return inner_.parameter_count(); }

 private:
  std::size_t in_channels_;
  std::size_t out_channels_;
  ConvGeometry geometry_;
  bool shares_tap_grids() const;

  KanLinear inner_;
  Shape input_shape_;
  BasisTable table_;
  std::vector<std::uint32_t> index_;
};

/// Parameter-free layer wrappers, mainly for gradient checking.
class AvgPool3d {
 public:
  AvgPool3d(const Extent3& window, const Extent3& stride) : window_(window), stride_(stride) {}
  Tensor forward(const Tensor& x, Mode = Mode::train);
  Tensor backward(const Tensor& dy) const;
  std::vector<Parameter*> parameters() { return {}; }

 private:
  Extent3 window_;
  Extent3 stride_;
  Shape input_shape_;
};

class GlobalAvgPool {
 public:
  Tensor forward(const Tensor& x, Mode = Mode::train);
  Tensor backward(const Tensor& dy) const { return global_avg_pool_backward(dy, input_shape_); }
  std::vector<Parameter*> parameters() { return {}; }

 private:
  Shape input_shape_;
};

}  // namespace kanet
