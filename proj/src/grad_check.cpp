#include "kanet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "kanet/random.hpp"

namespace kanet {

namespace {

// Directional difference sum((plus - minus) * R), taken elementwise so unchanged
// outputs cancel exactly instead of contributing rounding noise.
double projected_difference(const Tensor& plus, const Tensor& minus, const Tensor& projection) {
  double diff = 0.0;
  for (std::size_t i = 0; i < plus.size(); ++i) diff += (plus[i] - minus[i]) * projection[i];
  return diff;
}

}  // namespace

GradCheckResult grad_check(const GradCheckTarget& target, const GradCheckOptions& options) {
  if (!(options.perturbation > 0.0)) throw DomainError("grad_check: perturbation must be positive");
  if (target.variables.size() != target.names.size()) throw DimensionError("grad_check: names/variables mismatch");
  for (std::size_t v = 0; v < target.variables.size(); ++v) require_finite(*target.variables[v], target.names[v]);

  Rng rng(derive_seed(options.seed, 0x67726164));
  const Tensor y0 = target.forward();
  Tensor projection(y0.shape());
  for (double& r : projection.data()) r = rng.normal();

  const std::vector<Tensor> analytic = target.backward(projection);
  if (analytic.size() != target.variables.size()) throw DimensionError("grad_check: backward returned wrong count");

  // Flat coordinate list (variable, index).
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t v = 0; v < target.variables.size(); ++v) {
    require_shape(analytic[v], target.variables[v]->shape(), "grad_check analytic gradient of " + target.names[v]);
    for (std::size_t i = 0; i < target.variables[v]->size(); ++i) coords.emplace_back(v, i);
  }
  if (coords.size() > options.max_coordinates) {
    rng.shuffle(coords);
    coords.resize(options.max_coordinates);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult result;
  const double h = options.perturbation;
  for (const auto& [v, i] : coords) {
    Tensor& var = *target.variables[v];
    const double original = var[i];
    auto evaluate_at = [&](double offset) {
      var[i] = original + offset;
      Tensor y = target.forward();
      var[i] = original;
      return y;
    };
    // Fourth-order central stencil: (8 (f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h.
    const double near = projected_difference(evaluate_at(h), evaluate_at(-h), projection);
    const double far = projected_difference(evaluate_at(2.0 * h), evaluate_at(-2.0 * h), projection);
    const double numeric = (8.0 * near - far) / (12.0 * h);
    const double exact = analytic[v][i];
    const std::string where = target.names[v] + "[" + std::to_string(i) + "]";
    if (!std::isfinite(numeric) || !std::isfinite(exact)) {
      throw NumericError("grad_check: non-finite gradient at " + where + " (analytic " + std::to_string(exact) +
                         ", numeric " + std::to_string(numeric) + ")");
    }
    const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
    const double rel = std::abs(exact - numeric) / denom;
    if (result.worst_coordinate.empty() || rel > result.max_relative_error) {
      result.max_relative_error = rel;
      char detail[96];
      std::snprintf(detail, sizeof detail, " (analytic %.6e, numeric %.6e)", exact, numeric);
      result.worst_coordinate = where + detail;
    }
    ++result.coordinates_checked;
  }
  // Restore caches to the unperturbed state.
  target.forward();
  return result;
}

GradCheckResult grad_check(const DifferentiableOp& op, std::vector<Tensor> inputs, const GradCheckOptions& options) {
  GradCheckTarget target;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    target.variables.push_back(&inputs[i]);
    target.names.push_back(op.name + ".input" + std::to_string(i));
  }
  target.forward = [&] { return op.forward(inputs); };
  target.backward = [&](const Tensor& upstream) { return op.backward(inputs, upstream); };
  return grad_check(target, options);
}

DifferentiableOp matmul_op() {
  return {"matmul",
          [](const std::vector<Tensor>& in) { return matmul(in.at(0), in.at(1)); },
          [](const std::vector<Tensor>& in, const Tensor& dy) {
            auto g = matmul_backward(in.at(0), in.at(1), dy);
            return std::vector<Tensor>{std::move(g.da), std::move(g.db)};
          }};
}

DifferentiableOp silu_op() {
  return {"silu",
          [](const std::vector<Tensor>& in) { return silu(in.at(0)); },
          [](const std::vector<Tensor>& in, const Tensor& dy) {
            return std::vector<Tensor>{silu_backward(in.at(0), dy)};
          }};
}

}  // namespace kanet
