#include "kanet/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>

#include "kanet/batch_norm.hpp"
#include "kanet/conv3d.hpp"
#include "kanet/grad_check.hpp"
#include "kanet/kan_linear.hpp"
#include "kanet/model.hpp"
#include "kanet/random.hpp"
#include "kanet/train.hpp"

namespace kanet {

namespace {

double target_function(double x) {
  return std::sin(std::numbers::pi * x) + 0.5 * std::sin(2.0 * std::numbers::pi * x);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Full-batch Adam on mean squared error. step(x) must run forward + backward given
// the upstream gradient function and return predictions.
double fit_regression(const std::vector<Parameter*>& params, const ScalingConfig& cfg,
                      const std::function<Tensor(const Tensor&)>& forward,
                      const std::function<void(const Tensor&)>& backward, const Tensor& x, const Tensor& y) {
  TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  Adam adam(params, tc);
  const auto n = static_cast<double>(x.extent(0));
  auto mse = [&](const Tensor& pred) {
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - y[i]) * (pred[i] - y[i]);
    return s / n;
  };
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double progress = static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(cfg.steps, 1));
    const double floor = cfg.learning_rate / 100.0;
    adam.set_learning_rate(floor + 0.5 * (cfg.learning_rate - floor) * (1.0 + std::cos(std::numbers::pi * progress)));
    for (Parameter* p : params) p->zero_grad();
    const Tensor pred = forward(x);
    Tensor dy(pred.shape());
    for (std::size_t i = 0; i < pred.size(); ++i) dy[i] = 2.0 * (pred[i] - y[i]) / n;
    backward(dy);
    adam.step();
  }
  return mse(forward(x));
}

class Mlp {
 public:
  Mlp(std::size_t hidden, std::uint64_t seed) : first_(1, hidden, derive_seed(seed, 0)), second_(hidden, 1, derive_seed(seed, 1)) {}

  Tensor forward(const Tensor& x) {
    pre_ = first_.forward(x);
    return second_.forward(silu(pre_));
  }
  void backward(const Tensor& dy) { first_.backward(silu_backward(pre_, second_.backward(dy))); }
  std::vector<Parameter*> parameters() {
    auto p = first_.parameters();
    for (Parameter* q : second_.parameters()) p.push_back(q);
    return p;
  }
  static std::size_t count(std::size_t hidden) { return 3 * hidden + 1; }

 private:
  Linear first_, second_;
  Tensor pre_;
};

Tensor seeded(Shape shape, std::uint64_t seed, double scale) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

}  // namespace

double log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("log_log_slope: need at least two matched points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0 && y[i] > 0.0)) throw DomainError("log_log_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw DomainError("log_log_slope: all x values are equal");
  return sxy / sxx;
}

ScalingResult scaling_experiment(const ScalingConfig& cfg) {
  if (cfg.grid_sizes.size() < 2) throw ConfigError("scaling: at least two grid sizes are required");
  if (cfg.samples < 2 || cfg.steps < 1) throw ConfigError("scaling: samples and steps must be positive");
  Rng rng(cfg.seed);
  Tensor x({cfg.samples, 1}), y({cfg.samples, 1});
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    x[i] = rng.uniform(-1.0, 1.0);
    y[i] = target_function(x[i]);
  }
  ScalingResult result;
  std::vector<double> kan_n, kan_l, mlp_n, mlp_l;
  for (std::size_t g = 0; g < cfg.grid_sizes.size(); ++g) {
    KanLinearOptions o;
    o.grid_size = cfg.grid_sizes[g];
    o.spline_order = cfg.spline_order;
    KanLinear kan(1, 1, o, derive_seed(cfg.seed, 100 + g));
    const double kan_loss = fit_regression(
        kan.parameters(), cfg, [&](const Tensor& in) { return kan.forward(in); },
        [&](const Tensor& dy) { kan.backward(dy); }, x, y);
    const std::size_t kan_params = kan.parameter_count();
    result.rows.push_back({"kan", o.grid_size, kan_params, kan_loss});
    kan_n.push_back(static_cast<double>(kan_params));
    kan_l.push_back(kan_loss);

    const std::size_t hidden = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround((static_cast<double>(kan_params) - 1.0) / 3.0)));
    Mlp mlp(hidden, derive_seed(cfg.seed, 200 + g));
    const double mlp_loss = fit_regression(
        mlp.parameters(), cfg, [&](const Tensor& in) { return mlp.forward(in); },
        [&](const Tensor& dy) { mlp.backward(dy); }, x, y);
    result.rows.push_back({"mlp", o.grid_size, Mlp::count(hidden), mlp_loss});
    mlp_n.push_back(static_cast<double>(Mlp::count(hidden)));
    mlp_l.push_back(mlp_loss);
  }
  result.kan_slope = log_log_slope(kan_n, kan_l);
  result.mlp_slope = log_log_slope(mlp_n, mlp_l);
  return result;
}

std::string scaling_csv(const ScalingResult& r) {
  std::string s = "family,grid_size,parameters,loss\n";
  for (const ScalingRow& row : r.rows) {
    s += row.family + "," + std::to_string(row.grid_size) + "," + std::to_string(row.parameters) + "," + fmt(row.loss) + "\n";
  }
  s += "# kan_slope," + fmt(r.kan_slope) + "\n# mlp_slope," + fmt(r.mlp_slope) + "\n";
  return s;
}

GridDemoResult grid_demo(const GridDemoConfig& cfg) {
  if (cfg.samples < 2) throw ConfigError("grid-demo: at least two samples are required");
  Rng rng(cfg.seed);
  Tensor x({cfg.samples, 1});
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    const double center = i % 2 == 0 ? -cfg.mode_center : cfg.mode_center;
    x[i] = rng.normal(center, cfg.mode_width);
  }
  KanLinearOptions o;
  o.grid_size = cfg.grid_size;
  o.spline_order = cfg.spline_order;
  KanLinear layer(1, 1, o, derive_seed(cfg.seed, 1));
  GridDemoResult r;
  r.before = layer.grid(0).knots;
  GridUpdateConfig update;
  update.epsilon = cfg.epsilon;
  update.margin = cfg.margin;
  layer.update_grid(x, update);
  const SplineGrid after = layer.grid(0);
  r.after = after.knots;

  const auto [lo_it, hi_it] = std::minmax_element(x.data().begin(), x.data().end());
  const double lo = *lo_it, hi = *hi_it, span = hi - lo + 2.0 * cfg.margin;
  for (int i = 0; i <= cfg.grid_size; ++i) r.uniform.push_back(i * span / cfg.grid_size + lo - cfg.margin);

  const auto k = static_cast<std::size_t>(cfg.spline_order);
  const auto g = static_cast<std::size_t>(cfg.grid_size);
  auto counts = [&](const std::vector<double>& knots) {
    std::vector<std::size_t> c(g, 0);
    for (double v : x.data()) {
      for (std::size_t i = 0; i < g; ++i) {
        const double a = knots[k + i], b = knots[k + i + 1];
        if (v >= a && (v < b || (i + 1 == g && v <= b))) {
          ++c[i];
          break;
        }
      }
    }
    return c;
  };
  r.counts_before = counts(r.before);
  r.counts_after = counts(r.after);
  double widest = -1.0;
  for (std::size_t i = 0; i < g; ++i) {
    const double w = r.after[k + i + 1] - r.after[k + i];
    if (w > widest) {
      widest = w;
      r.widest_interval = i;
    }
  }
  const double mid = 0.5 * (r.after[k + r.widest_interval] + r.after[k + r.widest_interval + 1]);
  r.widest_between_modes = mid > -cfg.mode_center && mid < cfg.mode_center;
  r.non_decreasing = std::is_sorted(r.after.begin(), r.after.end()) && std::is_sorted(r.before.begin(), r.before.end());
  return r;
}

std::string format_grid_demo(const GridDemoResult& r, const GridDemoConfig& cfg) {
  const auto k = static_cast<std::size_t>(cfg.spline_order);
  char buf[160];
  std::string s = "epsilon: " + fmt(cfg.epsilon) + "\nmodes: " + fmt(-cfg.mode_center) + ", " + fmt(cfg.mode_center) +
                  " (sd " + fmt(cfg.mode_width) + ", " + std::to_string(cfg.samples) + " samples)\n";
  s += "\ninterval  before_lo  before_hi  count  after_lo  after_hi  width  count  uniform_lo\n";
  for (std::size_t i = 0; i + 1 < r.uniform.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%8zu  %9.5f  %9.5f  %5zu  %8.5f  %8.5f  %5.3f  %5zu  %10.5f\n", i, r.before[k + i],
                  r.before[k + i + 1], r.counts_before[i], r.after[k + i], r.after[k + i + 1],
                  r.after[k + i + 1] - r.after[k + i], r.counts_after[i], r.uniform[i]);
    s += buf;
  }
  s += "\nknots after:";
  for (double t : r.after) s += " " + fmt(t);
  s += "\nwidest interval: " + std::to_string(r.widest_interval) + (r.widest_between_modes ? " (between the modes)" : "") + "\n";
  s += std::string("knots non-decreasing: ") + (r.non_decreasing ? "yes" : "no") + "\n";
  return s;
}

std::vector<std::string> gradcheck_layers() {
  return {"kan_linear", "kan_conv3d", "conv3d", "batch_norm", "avg_pool3d", "global_avg_pool",
          "linear", "silu", "cross_entropy", "kanet"};
}

std::vector<GradCheckEntry> gradcheck_suite(const std::string& only, double tolerance) {
  const auto names = gradcheck_layers();
  if (!only.empty() && std::find(names.begin(), names.end(), only) == names.end()) {
    throw ConfigError("gradcheck: unknown layer '" + only + "'");
  }
  std::vector<GradCheckEntry> out;
  auto record = [&](const std::string& name, const GradCheckResult& r) {
    out.push_back({name, r.max_relative_error, r.coordinates_checked, r.max_relative_error < tolerance});
  };
  auto wanted = [&](const char* name) { return only.empty() || only == name; };

  if (wanted("kan_linear")) {
    KanLinear layer(3, 2, {}, 1);
    Tensor x = seeded({5, 3}, 2, 0.8);
    record("kan_linear", grad_check(layer_target(layer, x), {1e-5, 1}));
  }
  if (wanted("kan_conv3d")) {
    KanLinearOptions o;
    o.grid_sharing = GridSharing::per_group;
    KanConv3d layer(2, 2, ConvGeometry::cube(3, 1, 1), o, 3);
    Tensor x = seeded({1, 2, 4, 4, 4}, 4, 0.6);
    record("kan_conv3d", grad_check(layer_target(layer, x), {1e-5, 2}));
  }
  if (wanted("conv3d")) {
    Conv3d layer(2, 3, ConvGeometry::cube(3, 1, 1), 5);
    Tensor x = seeded({2, 2, 4, 4, 3}, 6, 1.0);
    record("conv3d", grad_check(layer_target(layer, x), {1e-5, 3}));
  }
  if (wanted("batch_norm")) {
    BatchNorm layer(3);
    Tensor x = seeded({4, 3, 2, 3, 2}, 7, 1.5);
    record("batch_norm", grad_check(layer_target(layer, x), {1e-5, 4}));
  }
  if (wanted("avg_pool3d")) {
    AvgPool3d layer({2, 2, 2}, {2, 2, 2});
    Tensor x = seeded({2, 2, 4, 4, 4}, 8, 1.0);
    record("avg_pool3d", grad_check(layer_target(layer, x), {1e-5, 5}));
  }
  if (wanted("global_avg_pool")) {
    GlobalAvgPool layer;
    Tensor x = seeded({2, 3, 3, 2, 4}, 9, 1.0);
    record("global_avg_pool", grad_check(layer_target(layer, x), {1e-5, 6}));
  }
  if (wanted("linear")) {
    Linear layer(4, 3, 10);
    Tensor x = seeded({5, 4}, 11, 1.0);
    record("linear", grad_check(layer_target(layer, x), {1e-5, 7}));
  }
  if (wanted("silu")) record("silu", grad_check(silu_op(), {seeded({4, 6}, 12, 2.0)}, {1e-5, 8}));
  if (wanted("cross_entropy")) {
    const std::vector<int> targets{1, 5, 3, 2};
    DifferentiableOp op{"cross_entropy",
                        [targets](const std::vector<Tensor>& in) { return Tensor({1}, {cross_entropy(in.at(0), targets).loss}); },
                        [targets](const std::vector<Tensor>& in, const Tensor& dy) {
                          Tensor g = cross_entropy(in.at(0), targets).grad;
                          g *= dy[0];
                          return std::vector<Tensor>{g};
                        }};
    record("cross_entropy", grad_check(op, {seeded({4, 5}, 13, 1.5)}, {1e-5, 9}));
  }
  if (wanted("kanet")) {
    NetworkConfig c;
    c.stages = {1, 1};
    c.k0 = 2;
    c.patch = {7, 7, 8};
    c.classes = 3;
    c.bottleneck_factor = 1;
    Model model(c, 14);
    Tensor x = seeded({2, 1, 7, 7, 8}, 15, 1.0);
    GradCheckOptions opt{1e-5, 10, 400};
    record("kanet", grad_check(layer_target(model, x), opt));
  }
  return out;
}

}  // namespace kanet
