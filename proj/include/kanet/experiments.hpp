#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kanet {

/// Regression of f(x) = sin(pi x) + 0.5 sin(2 pi x) on [-1, 1] by a single
/// 1 -> 1 KanLinear per grid size and by a SiLU MLP of matched parameter count.
struct ScalingConfig {
  std::vector<int> grid_sizes{3, 5, 10, 20};
  int spline_order = 3;
  std::size_t samples = 2048;
  /// Full-batch Adam steps per model; the rate decays by cosine to lr / 100.
  std::size_t steps = 4000;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
};

struct ScalingRow {
  std::string family;  // "kan" or "mlp"
  int grid_size = 0;   // the KAN grid this row is matched to
  std::size_t parameters = 0;
  double loss = 0.0;   // final mean squared error on the training sample
};

struct ScalingResult {
  std::vector<ScalingRow> rows;
  /// Least-squares slope of log(loss) against log(parameters) per family.
  double kan_slope = 0.0;
  double mlp_slope = 0.0;
};

ScalingResult scaling_experiment(const ScalingConfig& config);
std::string scaling_csv(const ScalingResult& result);
/// Slope of the least-squares line through (log x, log y).
double log_log_slope(const std::vector<double>& x, const std::vector<double>& y);

/// One 1 -> 1 KanLinear fed a seeded two-mode sample, before and after a grid update.
struct GridDemoConfig {
  double epsilon = 0.0;
  double margin = 0.01;
  int grid_size = 10;
  int spline_order = 3;
  std::size_t samples = 1000;
  double mode_center = 0.5;  // modes at -c and +c
  double mode_width = 0.08;
  std::uint64_t seed = 0;
};

struct GridDemoResult {
  std::vector<double> before;  // full knot vectors
  std::vector<double> after;
  std::vector<double> uniform;  // margin-padded uniform base points over the sample range
  std::vector<std::size_t> counts_before;  // samples per base interval
  std::vector<std::size_t> counts_after;
  std::size_t widest_interval = 0;  // base interval with the largest width after the update
  bool widest_between_modes = false;
  bool non_decreasing = false;
};

GridDemoResult grid_demo(const GridDemoConfig& config);
std::string format_grid_demo(const GridDemoResult& result, const GridDemoConfig& config);

struct GradCheckEntry {
  std::string layer;
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// Names accepted by gradcheck_suite.
std::vector<std::string> gradcheck_layers();
/// Finite-difference checks of every layer type at 64-bit; `only` selects one layer.
std::vector<GradCheckEntry> gradcheck_suite(const std::string& only = "", double tolerance = 1e-4);

}  // namespace kanet
