#include "kanet/conv3d.hpp"

#include <algorithm>
#include <cmath>

#include "kanet/random.hpp"

namespace kanet {

namespace {

void require_volume(const Tensor& x, const std::string& what) {
  if (x.rank() != 5) throw DimensionError(what + ": expected [B, C, D, H, W], got " + shape_string(x.shape()));
}

// Source coordinate of kernel tap `k` for output index `o`, or -1 when it lands in padding.
inline std::ptrdiff_t source_index(std::size_t o, std::size_t k, std::size_t axis, const ConvGeometry& g,
                                   std::size_t extent) {
  const auto pos = static_cast<std::ptrdiff_t>(o * g.stride[axis] + k * g.dilation[axis]) -
                   static_cast<std::ptrdiff_t>(g.padding[axis]);
  return (pos < 0 || pos >= static_cast<std::ptrdiff_t>(extent)) ? -1 : pos;
}

// For every (output position, kernel tap) pair, the flat spatial source offset or -1.
std::vector<std::ptrdiff_t> tap_table(const Extent3& in, const Extent3& out, const ConvGeometry& g) {
  const std::size_t taps = g.kernel_volume();
  std::vector<std::ptrdiff_t> table(out[0] * out[1] * out[2] * taps, -1);
  std::size_t idx = 0;
  for (std::size_t od = 0; od < out[0]; ++od)
    for (std::size_t oh = 0; oh < out[1]; ++oh)
      for (std::size_t ow = 0; ow < out[2]; ++ow)
        for (std::size_t kd = 0; kd < g.kernel[0]; ++kd)
          for (std::size_t kh = 0; kh < g.kernel[1]; ++kh)
            for (std::size_t kw = 0; kw < g.kernel[2]; ++kw, ++idx) {
              const auto d = source_index(od, kd, 0, g, in[0]);
              const auto h = source_index(oh, kh, 1, g, in[1]);
              const auto w = source_index(ow, kw, 2, g, in[2]);
              if (d >= 0 && h >= 0 && w >= 0) {
                table[idx] = (d * static_cast<std::ptrdiff_t>(in[1]) + h) * static_cast<std::ptrdiff_t>(in[2]) + w;
              }
            }
  return table;
}

// Under per_group sharing a KAN conv ties the grids of one input channel across its kernel taps.
KanLinearOptions conv_options(KanLinearOptions options, const ConvGeometry& g) {
  if (options.grid_sharing == GridSharing::per_group) options.grid_group = g.kernel_volume();
  return options;
}

void check_window(const Extent3& in, const Extent3& window, const Extent3& stride) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (window[a] == 0 || stride[a] == 0) throw GeometryError("avg_pool3d: window and stride must be positive");
    if (window[a] > in[a]) {
      throw GeometryError("avg_pool3d: window " + std::to_string(window[a]) + " larger than input extent " +
                          std::to_string(in[a]) + " on axis " + std::to_string(a));
    }
  }
}

}  // namespace

ConvGeometry ConvGeometry::cube(std::size_t kernel, std::size_t stride, std::size_t padding, std::size_t dilation) {
  return {{kernel, kernel, kernel}, {stride, stride, stride}, {padding, padding, padding}, {dilation, dilation, dilation}};
}

Extent3 ConvGeometry::output_extents(const Extent3& input) const {
  Extent3 out{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (kernel[a] == 0 || stride[a] == 0 || dilation[a] == 0) {
      throw GeometryError("kernel, stride and dilation must be positive");
    }
    const auto span = static_cast<std::ptrdiff_t>(dilation[a] * (kernel[a] - 1) + 1);
    const auto padded = static_cast<std::ptrdiff_t>(input[a] + 2 * padding[a]);
    if (span > padded) {
      throw GeometryError("kernel span " + std::to_string(span) + " exceeds padded extent " + std::to_string(padded) +
                          " on axis " + std::to_string(a));
    }
    out[a] = static_cast<std::size_t>((padded - span) / static_cast<std::ptrdiff_t>(stride[a])) + 1;
  }
  return out;
}

Extent3 spatial_extents(const Tensor& x) {
  require_volume(x, "spatial_extents");
  return {x.extent(2), x.extent(3), x.extent(4)};
}

Tensor unfold3d(const Tensor& x, const ConvGeometry& g) {
  require_volume(x, "unfold3d");
  const std::size_t batch = x.extent(0), channels = x.extent(1);
  const Extent3 in = spatial_extents(x);
  const Extent3 out = g.output_extents(in);
  const std::size_t positions = out[0] * out[1] * out[2];
  const std::size_t taps = g.kernel_volume();
  const std::size_t in_volume = in[0] * in[1] * in[2];
  const std::size_t width = channels * taps;
  const auto table = tap_table(in, out, g);

  Tensor cols({batch, positions, width});
  double* dst = cols.data().data();
  const double* src = x.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < positions; ++n) {
      const std::ptrdiff_t* row_taps = table.data() + n * taps;
      double* row = dst + (b * positions + n) * width;
      for (std::size_t c = 0; c < channels; ++c) {
        const double* plane = src + (b * channels + c) * in_volume;
        for (std::size_t t = 0; t < taps; ++t) {
          row[c * taps + t] = row_taps[t] >= 0 ? plane[row_taps[t]] : 0.0;
        }
      }
    }
  }
  return cols;
}

Tensor fold3d(const Tensor& columns, const Shape& input_shape, const ConvGeometry& g) {
  if (input_shape.size() != 5) throw DimensionError("fold3d: input shape must be 5-D");
  const std::size_t batch = input_shape[0], channels = input_shape[1];
  const Extent3 in{input_shape[2], input_shape[3], input_shape[4]};
  const Extent3 out = g.output_extents(in);
  const std::size_t positions = out[0] * out[1] * out[2];
  const std::size_t taps = g.kernel_volume();
  const std::size_t in_volume = in[0] * in[1] * in[2];
  const std::size_t width = channels * taps;
  require_shape(columns, {batch, positions, width}, "fold3d columns");
  const auto table = tap_table(in, out, g);

  Tensor x(input_shape);
  double* dst = x.data().data();
  const double* src = columns.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < positions; ++n) {
      const std::ptrdiff_t* row_taps = table.data() + n * taps;
      const double* row = src + (b * positions + n) * width;
      for (std::size_t c = 0; c < channels; ++c) {
        double* plane = dst + (b * channels + c) * in_volume;
        for (std::size_t t = 0; t < taps; ++t) {
          if (row_taps[t] >= 0) plane[row_taps[t]] += row[c * taps + t];
        }
      }
    }
  }
  return x;
}

namespace {

void check_conv_operands(const Tensor& x, const Tensor& weights, const ConvGeometry& g) {
  require_volume(x, "linear_conv3d");
  if (weights.rank() != 5 || weights.extent(1) != x.extent(1) || weights.extent(2) != g.kernel[0] ||
      weights.extent(3) != g.kernel[1] || weights.extent(4) != g.kernel[2]) {
    throw DimensionError("linear_conv3d: weights " + shape_string(weights.shape()) + " do not match input " +
                         shape_string(x.shape()) + " and kernel");
  }
}

// [B*N, C_out] rows -> [B, C_out, D', H', W'].
Tensor rows_to_volume(const Tensor& rows, std::size_t batch, std::size_t out_channels, const Extent3& out) {
  const std::size_t positions = out[0] * out[1] * out[2];
  Tensor y({batch, out_channels, out[0], out[1], out[2]});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t n = 0; n < positions; ++n)
      for (std::size_t o = 0; o < out_channels; ++o)
        y[(b * out_channels + o) * positions + n] = rows[(b * positions + n) * out_channels + o];
  return y;
}

Tensor volume_to_rows(const Tensor& y) {
  const std::size_t batch = y.extent(0), out_channels = y.extent(1);
  const std::size_t positions = y.size() / (batch * out_channels);
  Tensor rows({batch * positions, out_channels});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out_channels; ++o)
      for (std::size_t n = 0; n < positions; ++n)
        rows[(b * positions + n) * out_channels + o] = y[(b * out_channels + o) * positions + n];
  return rows;
}

}  // namespace

Tensor linear_conv3d(const Tensor& x, const Tensor& weights, const Tensor& bias, const ConvGeometry& g) {
  check_conv_operands(x, weights, g);
  const std::size_t batch = x.extent(0), out_channels = weights.extent(0);
  require_shape(bias, {out_channels}, "linear_conv3d bias");
  const Extent3 out = g.output_extents(spatial_extents(x));
  const Tensor cols = unfold3d(x, g);
  const std::size_t width = cols.extent(2);
  const Tensor rows = matmul(cols.reshaped({batch * cols.extent(1), width}),
                             transpose(weights.reshaped({out_channels, width})));
  Tensor y = rows_to_volume(rows, batch, out_channels, out);
  const std::size_t positions = out[0] * out[1] * out[2];
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out_channels; ++o)
      for (std::size_t n = 0; n < positions; ++n) y[(b * out_channels + o) * positions + n] += bias[o];
  return y;
}

Tensor linear_conv3d_naive(const Tensor& x, const Tensor& weights, const Tensor& bias, const ConvGeometry& g) {
  check_conv_operands(x, weights, g);
  const std::size_t batch = x.extent(0), channels = x.extent(1), out_channels = weights.extent(0);
  require_shape(bias, {out_channels}, "linear_conv3d bias");
  const Extent3 in = spatial_extents(x);
  const Extent3 out = g.output_extents(in);
  Tensor y({batch, out_channels, out[0], out[1], out[2]});
  auto xat = [&](std::size_t b, std::size_t c, std::ptrdiff_t d, std::ptrdiff_t h, std::ptrdiff_t w) {
    return x[(((b * channels + c) * in[0] + static_cast<std::size_t>(d)) * in[1] + static_cast<std::size_t>(h)) * in[2] +
             static_cast<std::size_t>(w)];
  };
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out_channels; ++o)
      for (std::size_t od = 0; od < out[0]; ++od)
        for (std::size_t oh = 0; oh < out[1]; ++oh)
          for (std::size_t ow = 0; ow < out[2]; ++ow) {
            double acc = bias[o];
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t kd = 0; kd < g.kernel[0]; ++kd)
                for (std::size_t kh = 0; kh < g.kernel[1]; ++kh)
                  for (std::size_t kw = 0; kw < g.kernel[2]; ++kw) {
                    const auto d = source_index(od, kd, 0, g, in[0]);
                    const auto h = source_index(oh, kh, 1, g, in[1]);
                    const auto w = source_index(ow, kw, 2, g, in[2]);
                    if (d < 0 || h < 0 || w < 0) continue;
                    const double wv =
                        weights[(((o * channels + c) * g.kernel[0] + kd) * g.kernel[1] + kh) * g.kernel[2] + kw];
                    acc += wv * xat(b, c, d, h, w);
                  }
            y[(((b * out_channels + o) * out[0] + od) * out[1] + oh) * out[2] + ow] = acc;
          }
  return y;
}

Conv3dGrads linear_conv3d_backward(const Tensor& x, const Tensor& weights, const Tensor& dy, const ConvGeometry& g) {
  check_conv_operands(x, weights, g);
  const std::size_t batch = x.extent(0), out_channels = weights.extent(0);
  const Extent3 out = g.output_extents(spatial_extents(x));
  require_shape(dy, {batch, out_channels, out[0], out[1], out[2]}, "linear_conv3d backward upstream");
  const Tensor cols = unfold3d(x, g);
  const std::size_t width = cols.extent(2);
  const Tensor cols2d = cols.reshaped({batch * cols.extent(1), width});
  const Tensor dy_rows = volume_to_rows(dy);
  const Tensor w2d = weights.reshaped({out_channels, width});

  Conv3dGrads grads;
  grads.dweights = matmul(transpose(dy_rows), cols2d).reshaped(weights.shape());
  grads.dbias = Tensor({out_channels});
  for (std::size_t r = 0; r < dy_rows.extent(0); ++r)
    for (std::size_t o = 0; o < out_channels; ++o) grads.dbias[o] += dy_rows.at(r, o);
  const Tensor dcols = matmul(dy_rows, w2d).reshaped(cols.shape());
  grads.dx = fold3d(dcols, x.shape(), g);
  return grads;
}

Tensor avg_pool3d(const Tensor& x, const Extent3& window, const Extent3& stride) {
  require_volume(x, "avg_pool3d");
  const Extent3 in = spatial_extents(x);
  check_window(in, window, stride);
  const ConvGeometry g{window, stride, {0, 0, 0}, {1, 1, 1}};
  const Extent3 out = g.output_extents(in);
  const std::size_t planes = x.extent(0) * x.extent(1);
  const double scale = 1.0 / static_cast<double>(window[0] * window[1] * window[2]);
  Tensor y({x.extent(0), x.extent(1), out[0], out[1], out[2]});
  const std::size_t in_volume = in[0] * in[1] * in[2];
  const std::size_t out_volume = out[0] * out[1] * out[2];
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data().data() + p * in_volume;
    double* dst = y.data().data() + p * out_volume;
    for (std::size_t od = 0; od < out[0]; ++od)
      for (std::size_t oh = 0; oh < out[1]; ++oh)
        for (std::size_t ow = 0; ow < out[2]; ++ow) {
          double acc = 0.0;
          for (std::size_t kd = 0; kd < window[0]; ++kd)
            for (std::size_t kh = 0; kh < window[1]; ++kh)
              for (std::size_t kw = 0; kw < window[2]; ++kw)
                acc += src[((od * stride[0] + kd) * in[1] + oh * stride[1] + kh) * in[2] + ow * stride[2] + kw];
          dst[(od * out[1] + oh) * out[2] + ow] = acc * scale;
        }
  }
  return y;
}

Tensor avg_pool3d_backward(const Tensor& dy, const Shape& input_shape, const Extent3& window, const Extent3& stride) {
  if (input_shape.size() != 5) throw DimensionError("avg_pool3d_backward: input shape must be 5-D");
  const Extent3 in{input_shape[2], input_shape[3], input_shape[4]};
  check_window(in, window, stride);
  const ConvGeometry g{window, stride, {0, 0, 0}, {1, 1, 1}};
  const Extent3 out = g.output_extents(in);
  require_shape(dy, {input_shape[0], input_shape[1], out[0], out[1], out[2]}, "avg_pool3d backward upstream");
  const std::size_t planes = input_shape[0] * input_shape[1];
  const double scale = 1.0 / static_cast<double>(window[0] * window[1] * window[2]);
  Tensor dx(input_shape);
  const std::size_t in_volume = in[0] * in[1] * in[2];
  const std::size_t out_volume = out[0] * out[1] * out[2];
  for (std::size_t p = 0; p < planes; ++p) {
    double* dst = dx.data().data() + p * in_volume;
    const double* src = dy.data().data() + p * out_volume;
    for (std::size_t od = 0; od < out[0]; ++od)
      for (std::size_t oh = 0; oh < out[1]; ++oh)
        for (std::size_t ow = 0; ow < out[2]; ++ow) {
          const double gval = src[(od * out[1] + oh) * out[2] + ow] * scale;
          for (std::size_t kd = 0; kd < window[0]; ++kd)
            for (std::size_t kh = 0; kh < window[1]; ++kh)
              for (std::size_t kw = 0; kw < window[2]; ++kw)
                dst[((od * stride[0] + kd) * in[1] + oh * stride[1] + kh) * in[2] + ow * stride[2] + kw] += gval;
        }
  }
  return dx;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("global_avg_pool: rank < 2");
  const std::size_t batch = x.extent(0), channels = x.extent(1);
  const std::size_t inner = x.size() / (batch * channels);
  Tensor y({batch, channels});
  for (std::size_t p = 0; p < batch * channels; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inner; ++i) acc += x[p * inner + i];
    y[p] = acc / static_cast<double>(inner);
  }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& dy, const Shape& input_shape) {
  const std::size_t batch = input_shape.at(0), channels = input_shape.at(1);
  require_shape(dy, {batch, channels}, "global_avg_pool backward upstream");
  Tensor dx(input_shape);
  const std::size_t inner = dx.size() / (batch * channels);
  for (std::size_t p = 0; p < batch * channels; ++p) {
    const double g = dy[p] / static_cast<double>(inner);
    for (std::size_t i = 0; i < inner; ++i) dx[p * inner + i] = g;
  }
  return dx;
}

Conv3d::Conv3d(std::size_t in_channels, std::size_t out_channels, const ConvGeometry& geometry, std::uint64_t seed)
    : in_channels_(in_channels), out_channels_(out_channels), geometry_(geometry) {
  if (in_channels == 0 || out_channels == 0) throw DimensionError("Conv3d needs positive channel counts");
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * geometry.kernel_volume()));
  Tensor w({out_channels, in_channels, geometry.kernel[0], geometry.kernel[1], geometry.kernel[2]});
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  Tensor b({out_channels});
  for (double& v : b.data()) v = rng.uniform(-bound, bound);
  weight_ = Parameter("weight", std::move(w));
  bias_ = Parameter("bias", std::move(b));
}

void Conv3d::visit_state(const std::string& prefix, const StateVisitor& visit) {
  visit(prefix + "weight", weight_.value);
  visit(prefix + "bias", bias_.value);
}

Tensor Conv3d::forward(const Tensor& x, Mode) {
  input_ = x;
  Tensor y = linear_conv3d(x, weight_.value, bias_.value, geometry_);
  require_finite(y, "Conv3d forward");
  return y;
}

Tensor Conv3d::backward(const Tensor& dy) {
  Conv3dGrads g = linear_conv3d_backward(input_, weight_.value, dy, geometry_);
  weight_.grad += g.dweights;
  bias_.grad += g.dbias;
  return std::move(g.dx);
}

KanConv3d::KanConv3d(std::size_t in_channels, std::size_t out_channels, const ConvGeometry& geometry,
                     const KanLinearOptions& options, std::uint64_t seed)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      geometry_(geometry),
      inner_(in_channels * geometry.kernel_volume(), out_channels, conv_options(options, geometry), seed) {}

bool KanConv3d::shares_tap_grids() const {
  const GridSharing sharing = inner_.options().grid_sharing;
  return sharing == GridSharing::per_layer ||
         (sharing == GridSharing::per_group && inner_.options().grid_group == geometry_.kernel_volume());
}

Tensor KanConv3d::forward(const Tensor& x, Mode mode) {
  require_volume(x, "KanConv3d");
  if (x.extent(1) != in_channels_) {
    throw DimensionError("KanConv3d: expected " + std::to_string(in_channels_) + " channels, got " +
                         shape_string(x.shape()));
  }
  input_shape_ = x.shape();
  const Extent3 out = geometry_.output_extents(spatial_extents(x));
  if (shares_tap_grids()) {
    // Every tap of a channel uses the same grid: evaluate each voxel once
    // (plus one zero-padding entry per channel) and address it through the tap table.
    const std::size_t batch = x.extent(0);
    const Extent3 in = spatial_extents(x);
    const std::size_t volume = in[0] * in[1] * in[2];
    const std::size_t taps = geometry_.kernel_volume();
    const std::size_t voxels = batch * in_channels_ * volume;
    std::vector<double> values(x.data().begin(), x.data().end());
    values.resize(voxels + in_channels_, 0.0);
    std::vector<std::uint32_t> features(voxels + in_channels_);
    for (std::size_t i = 0; i < voxels; ++i) features[i] = static_cast<std::uint32_t>((i / volume) % in_channels_ * taps);
    for (std::size_t c = 0; c < in_channels_; ++c) features[voxels + c] = static_cast<std::uint32_t>(c * taps);
    table_ = inner_.tabulate(values, features, mode == Mode::train);

    const auto taps_of = tap_table(in, out, geometry_);
    const std::size_t positions = out[0] * out[1] * out[2];
    const std::size_t width = inner_.in_features();
    index_.resize(batch * positions * width);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t n = 0; n < positions; ++n) {
        std::uint32_t* row = index_.data() + (b * positions + n) * width;
        const std::ptrdiff_t* row_taps = taps_of.data() + n * taps;
        for (std::size_t c = 0; c < in_channels_; ++c) {
          const std::size_t plane = (b * in_channels_ + c) * volume;
          for (std::size_t t = 0; t < taps; ++t) {
            row[c * taps + t] = static_cast<std::uint32_t>(
                row_taps[t] >= 0 ? plane + static_cast<std::size_t>(row_taps[t]) : voxels + c);
          }
        }
      }
    return rows_to_volume(inner_.forward_indexed(table_, index_, batch * positions), batch, out_channels_, out);
  }
  Tensor cols = unfold3d(x, geometry_);
  const std::size_t rows = cols.extent(0) * cols.extent(1);
  const Tensor y_rows = inner_.forward(std::move(cols).reshaped({rows, inner_.in_features()}), mode);
  return rows_to_volume(y_rows, x.extent(0), out_channels_, out);
}

Tensor KanConv3d::backward(const Tensor& dy) {
  const Extent3 out = geometry_.output_extents({input_shape_[2], input_shape_[3], input_shape_[4]});
  require_shape(dy, {input_shape_[0], out_channels_, out[0], out[1], out[2]}, "KanConv3d backward upstream");
  const std::size_t positions = out[0] * out[1] * out[2];
  if (shares_tap_grids()) {
    std::vector<double> dentries = inner_.backward_indexed(table_, index_, volume_to_rows(dy));
    Tensor dx(input_shape_);
    std::copy_n(dentries.begin(), dx.size(), dx.data().begin());
    return dx;
  }
  Tensor dcols = inner_.backward(volume_to_rows(dy));
  return fold3d(std::move(dcols).reshaped({input_shape_[0], positions, inner_.in_features()}), input_shape_, geometry_);
}

void KanConv3d::update_grid(const Tensor& x, const GridUpdateConfig& config, std::size_t max_rows, std::uint64_t seed) {
  const Tensor cols = unfold3d(x, geometry_);
  const std::size_t rows = cols.extent(0) * cols.extent(1);
  const std::size_t width = inner_.in_features();
  if (rows <= max_rows) {
    inner_.update_grid(cols.reshaped({rows, width}), config);
    return;
  }
  std::vector<std::size_t> order(rows);
  for (std::size_t i = 0; i < rows; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  order.resize(max_rows);
  std::sort(order.begin(), order.end());
  Tensor sample({max_rows, width});
  for (std::size_t r = 0; r < max_rows; ++r)
    std::copy_n(cols.data().data() + order[r] * width, width, sample.data().data() + r * width);
  inner_.update_grid(sample, config);
}

Tensor AvgPool3d::forward(const Tensor& x, Mode) {
  input_shape_ = x.shape();
  return avg_pool3d(x, window_, stride_);
}

Tensor AvgPool3d::backward(const Tensor& dy) const { return avg_pool3d_backward(dy, input_shape_, window_, stride_); }

Tensor GlobalAvgPool::forward(const Tensor& x, Mode) {
  input_shape_ = x.shape();
  return global_avg_pool(x);
}

}  // namespace kanet
