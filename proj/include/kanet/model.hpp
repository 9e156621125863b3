#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kanet/batch_norm.hpp"
#include "kanet/conv3d.hpp"
#include "kanet/kan_linear.hpp"

namespace kanet {

enum class HeadKind { linear, kan };

struct NetworkConfig {
  /// Dense layers per stage.
  std::vector<std::size_t> stages{4, 6, 8};
  std::size_t k0 = 8;
  int grid_size = 5;
  int spline_order = 3;
  double epsilon = 0.02;
  double margin = 0.01;
  double noise_scale = 0.1;
  /// Grid sharing of the KAN conv layers; per_group ties grids per input channel.
  GridSharing grid_sharing = GridSharing::per_group;
  /// Input patch as (M, N, L): spatial rows, spatial cols, bands.
  std::array<std::size_t, 3> patch{17, 17, 200};
  std::size_t classes = 16;
  /// Width of the 1^3 bottleneck in units of the growth rate; 0 disables it.
  std::size_t bottleneck_factor = 4;
  double compression = 0.5;
  HeadKind head = HeadKind::linear;

  /// Throws ConfigError on invalid values or when transitions shrink an axis below 1.
  void validate() const;

  /// Options of the KAN conv layers; the KAN head keeps one grid per feature unless sharing is per_layer.
  KanLinearOptions spline_options() const;
  KanLinearOptions head_options() const;
  GridUpdateConfig grid_update() const;

  bool operator==(const NetworkConfig&) const = default;
};

/// 2^(m-1) * k0 for the 1-based stage index m.
std::size_t growth_rate(std::size_t stage, std::size_t k0);

/// Fully connected layer with bias: [B, in] -> [B, out].
class Linear {
 public:
  Linear(std::size_t in_features, std::size_t out_features, std::uint64_t seed);

  Tensor forward(const Tensor& x, Mode mode = Mode::train);
  Tensor backward(const Tensor& dy);

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }
  void visit_state(const std::string& prefix, const StateVisitor& visit);

 private:
  Parameter weight_;  // [out, in]
  Parameter bias_;    // [out]
  Tensor input_;
};

/// BN -> SiLU -> optional 1^3 bottleneck -> KAN conv 3^3 (pad 1) emitting `growth` channels.
struct DenseLayer {
  BatchNorm norm;
  std::optional<Conv3d> bottleneck;
  KanConv3d conv;
  Tensor pre_activation;
};

/// BN -> 1^3 conv compressing channels -> 2^3 average pool with stride 2.
struct Transition {
  BatchNorm norm;
  Conv3d conv;
  AvgPool3d pool;
};

/// Per-block channel bookkeeping recorded at assembly.
struct BlockInfo {
  std::size_t growth = 0;
  std::size_t input_channels = 0;
  std::size_t output_channels = 0;  // input + layers * growth
  Extent3 resolution{};
  /// Channels of each carried earlier feature (stem first, then earlier blocks' new features).
  std::vector<std::size_t> carried_channels;
};

/// Optional instrumentation for a forward pass.
struct ForwardProbe {
  /// Zeroes the new features produced by this block everywhere they are consumed.
  std::optional<std::size_t> ablate_block;
  /// When set, receives every block's input tensor.
  std::vector<Tensor>* block_inputs = nullptr;
};

class Model {
 public:
  Model(const NetworkConfig& config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }
  const std::vector<BlockInfo>& blocks() const { return blocks_; }

  /// x: [B, 1, M, N, L] -> logits [B, classes].
  Tensor forward(const Tensor& x, Mode mode, const ForwardProbe* probe = nullptr);
  /// Back-propagates dL/dlogits through the last forward, accumulating parameter gradients; returns dL/dx.
  Tensor backward(const Tensor& dlogits);

  /// Calibration pass in which every KAN layer updates its grids on the
  /// inputs it sees (conv layers subsampled to at most max_rows unfolded rows).
  void update_grids(const Tensor& x, const GridUpdateConfig& config, std::size_t max_rows, std::uint64_t seed);

  std::vector<Parameter*> parameters();
  void zero_grad();
  /// Every persistent tensor (parameters, BN running stats, knot tables) in assembly order.
  void visit_state(const StateVisitor& visit);

  std::size_t parameter_count();

 private:
  struct GridUpdateRequest {
    GridUpdateConfig config;
    std::size_t max_rows;
    std::uint64_t seed;
  };
  Tensor run(const Tensor& x, Mode mode, const ForwardProbe* probe, const GridUpdateRequest* grid_update);

  NetworkConfig config_;
  Conv3d stem_;
  std::vector<std::vector<DenseLayer>> layers_;
  std::vector<Transition> transitions_;
  std::vector<BlockInfo> blocks_;
  GlobalAvgPool pool_;
  std::unique_ptr<Linear> linear_head_;
  std::unique_ptr<KanLinear> kan_head_;

  // Forward caches for backward.
  Shape input_shape_;
  std::vector<std::vector<Shape>> carried_shapes_;  // per transition: shapes of carried tensors before pooling
};

/// Total trainable scalars.
std::size_t count_parameters(Model& model);

}  // namespace kanet
