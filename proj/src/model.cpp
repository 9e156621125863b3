#include "kanet/model.hpp"

#include <cmath>

#include "kanet/errors.hpp"
#include "kanet/random.hpp"

namespace kanet {

namespace {

constexpr Extent3 kPoolWindow{2, 2, 2};
const char* const kAxisNames[3] = {"M (rows)", "N (cols)", "L (bands)"};

std::size_t compressed(std::size_t channels, double theta) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(theta * static_cast<double>(channels))));
}

Tensor concat(const std::vector<const Tensor*>& parts) { return concat_channels(parts); }

Tensor zero_channels(Tensor t) {
  t.fill(0.0);
  return t;
}

}  // namespace

void NetworkConfig::validate() const {
  if (stages.empty()) throw ConfigError("network: at least one stage is required");
  for (std::size_t s = 0; s < stages.size(); ++s)
    if (stages[s] == 0) throw ConfigError("network: stage " + std::to_string(s + 1) + " has no dense layers");
  if (k0 == 0) throw ConfigError("network: k0 must be positive");
  if (grid_size < 1) throw ConfigError("network: grid_size must be >= 1");
  if (spline_order < 1 || spline_order > SplineGrid::kMaxOrder)
    throw ConfigError("network: spline_order must be in [1, " + std::to_string(SplineGrid::kMaxOrder) + "]");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("network: epsilon must be in [0, 1]");
  if (!(margin >= 0.0)) throw ConfigError("network: margin must be >= 0");
  if (!(noise_scale >= 0.0)) throw ConfigError("network: noise_scale must be >= 0");
  if (classes < 2) throw ConfigError("network: at least two classes are required");
  if (!(compression > 0.0 && compression <= 1.0)) throw ConfigError("network: compression must be in (0, 1]");
  for (int a = 0; a < 3; ++a) {
    std::size_t extent = patch[static_cast<std::size_t>(a)];
    if (extent == 0) throw ConfigError(std::string("network: patch axis ") + kAxisNames[a] + " is empty");
    for (std::size_t t = 1; t < stages.size(); ++t) {
      extent /= 2;
      if (extent < 1) {
        throw ConfigError(std::string("network: axis ") + kAxisNames[a] + " of the " +
                          std::to_string(patch[static_cast<std::size_t>(a)]) + "-wide patch drops below 1 after " +
                          std::to_string(t) + " transition(s)");
      }
    }
  }
}

KanLinearOptions NetworkConfig::spline_options() const {
  KanLinearOptions o;
  o.grid_size = grid_size;
  o.spline_order = spline_order;
  o.noise_scale = noise_scale;
  o.grid_sharing = grid_sharing;
  return o;
}

KanLinearOptions NetworkConfig::head_options() const {
  KanLinearOptions o = spline_options();
  if (grid_sharing == GridSharing::per_group) o.grid_sharing = GridSharing::per_feature;
  return o;
}

GridUpdateConfig NetworkConfig::grid_update() const {
  GridUpdateConfig g;
  g.epsilon = epsilon;
  g.margin = margin;
  return g;
}

std::size_t growth_rate(std::size_t stage, std::size_t k0) {
  if (stage < 1) throw DomainError("growth_rate: stage index starts at 1");
  return (std::size_t{1} << (stage - 1)) * k0;
}

Linear::Linear(std::size_t in_features, std::size_t out_features, std::uint64_t seed) {
  if (in_features == 0 || out_features == 0) throw DimensionError("Linear needs positive dimensions");
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  Tensor w({out_features, in_features});
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  Tensor b({out_features});
  for (double& v : b.data()) v = rng.uniform(-bound, bound);
  weight_ = Parameter("weight", std::move(w));
  bias_ = Parameter("bias", std::move(b));
}

Tensor Linear::forward(const Tensor& x, Mode) {
  input_ = x;
  Tensor y = matmul(x, transpose(weight_.value));
  const std::size_t out = bias_.value.size();
  for (std::size_t r = 0; r < y.extent(0); ++r)
    for (std::size_t o = 0; o < out; ++o) y.at(r, o) += bias_.value[o];
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  require_shape(dy, {input_.extent(0), bias_.value.size()}, "Linear backward upstream");
  weight_.grad += matmul(transpose(dy), input_);
  for (std::size_t r = 0; r < dy.extent(0); ++r)
    for (std::size_t o = 0; o < dy.extent(1); ++o) bias_.grad[o] += dy.at(r, o);
  return matmul(dy, weight_.value);
}

void Linear::visit_state(const std::string& prefix, const StateVisitor& visit) {
  visit(prefix + "weight", weight_.value);
  visit(prefix + "bias", bias_.value);
}

Model::Model(const NetworkConfig& config, std::uint64_t seed)
    : config_((config.validate(), config)),
      stem_(1, 2 * config.k0, ConvGeometry::cube(3, 1, 1), derive_seed(seed, 0)) {
  std::uint64_t stream = 1;
  const KanLinearOptions spline = config_.spline_options();
  const std::size_t stem_channels = 2 * config_.k0;
  Extent3 resolution{config_.patch[0], config_.patch[1], config_.patch[2]};
  std::vector<std::size_t> carried;  // channels of stem and of each finished block's new features
  std::size_t block_input = stem_channels;

  for (std::size_t s = 0; s < config_.stages.size(); ++s) {
    BlockInfo info;
    info.growth = growth_rate(s + 1, config_.k0);
    info.resolution = resolution;
    info.carried_channels = carried;
    info.input_channels = block_input;

    std::vector<DenseLayer> block;
    block.reserve(config_.stages[s]);
    std::size_t channels = block_input;
    for (std::size_t l = 0; l < config_.stages[s]; ++l) {
      std::optional<Conv3d> bottleneck;
      std::size_t kan_in = channels;
      if (config_.bottleneck_factor > 0) {
        kan_in = config_.bottleneck_factor * info.growth;
        bottleneck.emplace(channels, kan_in, ConvGeometry::cube(1), derive_seed(seed, stream++));
      }
      block.push_back(DenseLayer{BatchNorm(channels), std::move(bottleneck),
                                 KanConv3d(kan_in, info.growth, ConvGeometry::cube(3, 1, 1), spline,
                                           derive_seed(seed, stream++)),
                                 Tensor()});
      channels += info.growth;
    }
    info.output_channels = channels;
    if (channels != block_input + config_.stages[s] * info.growth) throw ConfigError("network: channel bookkeeping mismatch");
    layers_.push_back(std::move(block));

    if (s == 0) carried.push_back(stem_channels);
    carried.push_back(channels - block_input);
    blocks_.push_back(std::move(info));

    if (s + 1 < config_.stages.size()) {
      const std::size_t out = compressed(channels, config_.compression);
      transitions_.push_back(Transition{BatchNorm(channels),
                                        Conv3d(channels, out, ConvGeometry::cube(1), derive_seed(seed, stream++)),
                                        AvgPool3d(kPoolWindow, kPoolWindow)});
      for (auto& r : resolution) r /= 2;
      block_input = out;
      for (std::size_t c : carried) block_input += c;
    }
  }

  const std::size_t features = blocks_.back().output_channels;
  if (config_.head == HeadKind::linear) {
    linear_head_ = std::make_unique<Linear>(features, config_.classes, derive_seed(seed, stream++));
  } else {
    kan_head_ = std::make_unique<KanLinear>(features, config_.classes, config_.head_options(), derive_seed(seed, stream++));
  }
}

Tensor Model::forward(const Tensor& x, Mode mode, const ForwardProbe* probe) { return run(x, mode, probe, nullptr); }

void Model::update_grids(const Tensor& x, const GridUpdateConfig& config, std::size_t max_rows, std::uint64_t seed) {
  const GridUpdateRequest request{config, max_rows, seed};
  run(x, Mode::calibrate, nullptr, &request);
}

Tensor Model::run(const Tensor& x, Mode mode, const ForwardProbe* probe, const GridUpdateRequest* grid_update) {
  const Shape expected{x.rank() > 0 ? x.extent(0) : 0, 1, config_.patch[0], config_.patch[1], config_.patch[2]};
  if (x.rank() != 5 || x.shape() != expected) {
    throw DimensionError("model: expected input " + shape_string(expected) + ", got " + shape_string(x.shape()));
  }
  input_shape_ = x.shape();
  carried_shapes_.assign(transitions_.size(), {});
  std::uint64_t update_index = 0;

  const Tensor stem = stem_.forward(x, mode);
  std::vector<Tensor> carried;
  Tensor block_in = stem;
  Tensor running;

  for (std::size_t s = 0; s < layers_.size(); ++s) {
    if (probe && probe->block_inputs) probe->block_inputs->push_back(block_in);
    running = block_in;
    std::vector<Tensor> fresh;
    for (DenseLayer& layer : layers_[s]) {
      layer.pre_activation = layer.norm.forward(running, mode);
      Tensor a = silu(layer.pre_activation);
      if (layer.bottleneck) a = layer.bottleneck->forward(a, mode);
      if (grid_update) {
        layer.conv.update_grid(a, grid_update->config, grid_update->max_rows,
                               derive_seed(grid_update->seed, update_index++));
      }
      fresh.push_back(layer.conv.forward(a, mode));
      const Tensor* parts[] = {&running, &fresh.back()};
      running = concat_channels(parts);
    }

    const bool ablate = probe && probe->ablate_block && *probe->ablate_block == s;
    std::vector<const Tensor*> fresh_parts;
    for (const Tensor& f : fresh) fresh_parts.push_back(&f);
    Tensor block_new = concat(fresh_parts);
    if (ablate) {
      block_new = zero_channels(std::move(block_new));
      const Tensor* parts[] = {&block_in, &block_new};
      running = concat_channels(parts);
    }
    if (s == 0) carried.push_back(stem);
    carried.push_back(std::move(block_new));

    if (s < transitions_.size()) {
      Transition& t = transitions_[s];
      const Tensor reduced = t.pool.forward(t.conv.forward(t.norm.forward(running, mode), mode), mode);
      for (Tensor& c : carried) {
        carried_shapes_[s].push_back(c.shape());
        c = avg_pool3d(c, kPoolWindow, kPoolWindow);
      }
      std::vector<const Tensor*> parts{&reduced};
      for (const Tensor& c : carried) parts.push_back(&c);
      block_in = concat(parts);
      if (block_in.extent(1) != blocks_[s + 1].input_channels) throw DimensionError("model: block input channel mismatch");
    }
  }

  const Tensor features = pool_.forward(running, mode);
  if (linear_head_) return linear_head_->forward(features, mode);
  if (grid_update) kan_head_->update_grid(features, grid_update->config);
  return kan_head_->forward(features, mode);
}

Tensor Model::backward(const Tensor& dlogits) {
  Tensor d_running = pool_.backward(linear_head_ ? linear_head_->backward(dlogits) : kan_head_->backward(dlogits));
  std::vector<Tensor> d_carried;  // gradients of carried tensors at the current resolution
  Tensor d_stem;

  for (std::size_t s = layers_.size(); s-- > 0;) {
    const BlockInfo& info = blocks_[s];
    // Gradient reaching this block's new features through later blocks.
    if (!d_carried.empty()) {
      const Tensor& d_new = d_carried.back();
      for (std::size_t b = 0; b < d_running.extent(0); ++b) {
        const std::size_t inner = d_new.size() / (d_new.extent(0) * d_new.extent(1));
        const std::size_t new_ch = d_new.extent(1);
        for (std::size_t c = 0; c < new_ch; ++c)
          for (std::size_t i = 0; i < inner; ++i)
            d_running[(b * info.output_channels + info.input_channels + c) * inner + i] += d_new[(b * new_ch + c) * inner + i];
      }
      d_carried.pop_back();
    }

    for (std::size_t l = layers_[s].size(); l-- > 0;) {
      DenseLayer& layer = layers_[s][l];
      const std::size_t before = info.input_channels + l * info.growth;
      const std::size_t split[] = {before, info.growth};
      std::vector<Tensor> parts = split_channels(d_running, split);
      Tensor da = layer.conv.backward(parts[1]);
      if (layer.bottleneck) da = layer.bottleneck->backward(da);
      parts[0] += layer.norm.backward(silu_backward(layer.pre_activation, da));
      d_running = std::move(parts[0]);
    }

    if (s == 0) {
      if (!d_carried.empty()) d_running += d_carried.front();  // stem used as a carried source
      d_stem = std::move(d_running);
      break;
    }

    // Block input = [transition output, carried sources...]; route each slice.
    std::vector<std::size_t> split{transitions_[s - 1].conv.out_channels()};
    for (std::size_t c : info.carried_channels) split.push_back(c);
    std::vector<Tensor> parts = split_channels(d_running, split);
    if (d_carried.empty()) {
      d_carried.assign(parts.begin() + 1, parts.end());
    } else {
      for (std::size_t i = 0; i < d_carried.size(); ++i) d_carried[i] += parts[i + 1];
    }
    for (std::size_t i = 0; i < d_carried.size(); ++i)
      d_carried[i] = avg_pool3d_backward(d_carried[i], carried_shapes_[s - 1][i], kPoolWindow, kPoolWindow);

    Transition& t = transitions_[s - 1];
    d_running = t.norm.backward(t.conv.backward(t.pool.backward(parts[0])));
  }
  return stem_.backward(d_stem);
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  auto add = [&out](std::vector<Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  add(stem_.parameters());
  for (std::size_t s = 0; s < layers_.size(); ++s) {
    for (DenseLayer& layer : layers_[s]) {
      add(layer.norm.parameters());
      if (layer.bottleneck) add(layer.bottleneck->parameters());
      add(layer.conv.parameters());
    }
    if (s < transitions_.size()) {
      add(transitions_[s].norm.parameters());
      add(transitions_[s].conv.parameters());
    }
  }
  add(linear_head_ ? linear_head_->parameters() : kan_head_->parameters());
  return out;
}

void Model::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

void Model::visit_state(const StateVisitor& visit) {
  stem_.visit_state("stem.", visit);
  for (std::size_t s = 0; s < layers_.size(); ++s) {
    const std::string stage = "stage" + std::to_string(s) + ".";
    for (std::size_t l = 0; l < layers_[s].size(); ++l) {
      DenseLayer& layer = layers_[s][l];
      const std::string base = stage + "layer" + std::to_string(l) + ".";
      layer.norm.visit_state(base + "norm.", visit);
      if (layer.bottleneck) layer.bottleneck->visit_state(base + "bottleneck.", visit);
      layer.conv.visit_state(base + "conv.", visit);
    }
    if (s < transitions_.size()) {
      transitions_[s].norm.visit_state(stage + "transition.norm.", visit);
      transitions_[s].conv.visit_state(stage + "transition.conv.", visit);
    }
  }
  if (linear_head_) {
    linear_head_->visit_state("head.", visit);
  } else {
    kan_head_->visit_state("head.", visit);
  }
}

std::size_t Model::parameter_count() {
  std::size_t total = 0;
  for (const Parameter* p : parameters()) total += p->value.size();
  return total;
}

std::size_t count_parameters(Model& model) { return model.parameter_count(); }

}  // namespace kanet
