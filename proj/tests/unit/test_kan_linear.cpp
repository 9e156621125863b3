#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "kanet/grad_check.hpp"
#include "kanet/kan_linear.hpp"
#include "test_support.hpp"

using namespace kanet;
using kanet::testing::normal_equations_solve;
using kanet::testing::random_normal;
using kanet::testing::random_tensor;

namespace {

KanLinearOptions identity_options() {
  KanLinearOptions o;
  o.base_activation = BaseActivation::identity;
  return o;
}

// Sets c[o, j, :] to samples of a smooth curve so the spline branch is smooth.
void smooth_coefficients(KanLinear& layer, double phase) {
  Tensor& c = layer.spline_weight().value;
  const std::size_t nb = layer.basis_count();
  for (std::size_t e = 0; e < layer.out_features() * layer.in_features(); ++e)
    for (std::size_t i = 0; i < nb; ++i)
      c[e * nb + i] = std::sin(0.7 * static_cast<double>(i) + phase * static_cast<double>(e + 1));
}

double relative_rms(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("identity base with zero scaler is the linear map") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t in = 2 + seed % 5, out = 1 + seed % 4, batch = 3 + seed;
    KanLinear layer(in, out, identity_options(), seed);
    layer.spline_scaler().value.fill(0.0);
    const Tensor x = random_tensor({batch, in}, seed + 50, -3.0, 3.0);
    const Tensor expected = matmul(x, transpose(layer.base_weight().value));
    CHECK(layer.forward(x) == expected);
  }
}

TEST_CASE("constant-one splines sum to in_features") {
  KanLinearOptions opt;
  KanLinear layer(7, 3, opt, 1);
  layer.base_weight().value.fill(0.0);
  layer.spline_weight().value.fill(1.0);
  const Tensor y = layer.forward(random_tensor({6, 7}, 2, -0.99, 0.99));
  for (double v : y.data()) CHECK(v == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("kan_linear gradients") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    KanLinear layer(6, 4, {}, seed);
    layer.spline_scaler().value = random_tensor({4, 6}, seed + 9, 0.5, 1.5);
    Tensor x = random_normal({5, 6}, seed + 3, 0.6);
    auto target = layer_target(layer, x);
    const auto r = grad_check(target, {1e-5, seed});
    INFO(r.worst_coordinate);
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("kan_linear gradients with identity base and per-layer grid") {
  KanLinearOptions opt = identity_options();
  opt.grid_sharing = GridSharing::per_layer;
  opt.spline_order = 2;
  KanLinear layer(3, 2, opt, 4);
  Tensor x = random_tensor({4, 3}, 5);
  auto target = layer_target(layer, x);
  CHECK(grad_check(target, {1e-5, 4}).max_relative_error < 1e-4);
}

TEST_CASE("input width mismatch is rejected") {
  KanLinear layer(3, 2, {}, 0);
  CHECK_THROWS_AS(layer.forward(Tensor({2, 4})), DimensionError);
}

TEST_CASE("initialization is deterministic per seed") {
  KanLinear a(5, 3, {}, 42), b(5, 3, {}, 42), c(5, 3, {}, 43);
  CHECK(a.base_weight().value == b.base_weight().value);
  CHECK(a.spline_weight().value == b.spline_weight().value);
  CHECK(a.knots() == b.knots());
  CHECK_FALSE(a.spline_weight().value == c.spline_weight().value);
  const double bound = 1.0 / std::sqrt(5.0);
  for (double w : a.base_weight().value.data()) CHECK(std::abs(w) <= bound);
  for (double s : a.spline_scaler().value.data()) CHECK(s == 1.0);
  CHECK(a.grid(2) == uniform_grid(5, 3, -1.0, 1.0));
}

TEST_CASE("zero noise gives a zero spline branch") {
  KanLinearOptions opt;
  opt.noise_scale = 0.0;
  KanLinear layer(4, 3, opt, 7);
  const Tensor s = layer.spline_branch(random_normal({32, 4}, 1));
  for (double v : s.data()) CHECK(v == 0.0);
}

TEST_CASE("default noise keeps the spline branch small") {
  KanLinear layer(8, 4, {}, 3);
  const Tensor s = layer.spline_branch(random_normal({256, 8}, 4));
  CHECK(kanet::testing::rms(s.values()) < 1.0);
}

TEST_CASE("epsilon one reproduces the uniform grid formula") {
  KanLinear layer(3, 2, {}, 1);
  const Tensor x = random_normal({40, 3}, 8);
  GridUpdateConfig cfg;
  cfg.epsilon = 1.0;
  cfg.margin = 0.05;
  layer.update_grid(x, cfg);
  for (std::size_t j = 0; j < 3; ++j) {
    double lo = x.at(0, j), hi = x.at(0, j);
    for (std::size_t b = 0; b < 40; ++b) {
      lo = std::min(lo, x.at(b, j));
      hi = std::max(hi, x.at(b, j));
    }
    const SplineGrid g = layer.grid(j);
    for (int i = 0; i <= 5; ++i) {
      const double expected = i * (hi - lo + 2 * cfg.margin) / 5 + lo - cfg.margin;
      CHECK(g.knots[static_cast<std::size_t>(i + 3)] == expected);
    }
  }
}

TEST_CASE("epsilon zero places knots at order statistics") {
  KanLinear layer(2, 2, {}, 1);
  const Tensor x = random_tensor({2000, 2}, 9, -2.0, 3.0);
  GridUpdateConfig cfg;
  cfg.epsilon = 0.0;
  layer.update_grid(x, cfg);
  for (std::size_t j = 0; j < 2; ++j) {
    const SplineGrid g = layer.grid(j);
    CHECK(std::is_sorted(g.knots.begin(), g.knots.end()));
    for (int i = 0; i <= 5; ++i) {
      const double t = g.knots[static_cast<std::size_t>(i + 3)];
      CHECK(t >= -2.0 - cfg.margin);
      CHECK(t <= 3.0 + cfg.margin);
      CHECK(t == doctest::Approx(-2.0 + i).epsilon(0.1).scale(1.0));
    }
  }
}

TEST_CASE("updated grids are monotone and cover the batch") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    KanLinear layer(4, 2, {}, seed);
    Tensor x = random_normal({30 + seed, 4}, seed + 20, 0.3 + seed);
    GridUpdateConfig cfg;
    cfg.epsilon = 0.25 * static_cast<double>(seed % 5);
    cfg.margin = 0.01 * static_cast<double>(seed % 3);
    layer.update_grid(x, cfg);
    for (std::size_t j = 0; j < 4; ++j) {
      const SplineGrid g = layer.grid(j);
      CHECK(std::is_sorted(g.knots.begin(), g.knots.end()));
      for (std::size_t b = 0; b < x.extent(0); ++b) {
        CHECK(g.lower() <= x.at(b, j));
        CHECK(g.upper() >= x.at(b, j));
      }
    }
  }
}

TEST_CASE("grid update preserves the smooth spline branch") {
  KanLinear layer(3, 2, {}, 5);
  smooth_coefficients(layer, 0.3);
  const Tensor x = random_normal({256, 3}, 6, 0.4);
  const Tensor before = layer.spline_branch(x);
  layer.update_grid(x, {});
  const Tensor after = layer.spline_branch(x);
  CHECK(relative_rms(after, before) < 5e-2);
}

TEST_CASE("re-fit matches a normal-equations oracle") {
  KanLinear layer(2, 3, {}, 11);
  smooth_coefficients(layer, 0.5);
  const Tensor x = random_normal({120, 2}, 12, 0.5);
  const std::size_t nb = layer.basis_count();

  // Old per-edge spline values (without the scaler) on the batch.
  std::vector<SplineGrid> old_grids{layer.grid(0), layer.grid(1)};
  const Tensor old_c = layer.spline_weight().value;
  GridUpdateConfig cfg;
  cfg.epsilon = 0.3;
  layer.update_grid(x, cfg);

  double worst = 0.0;
  for (std::size_t j = 0; j < 2; ++j) {
    std::vector<double> col(120);
    for (std::size_t b = 0; b < 120; ++b) col[b] = x.at(b, j);
    const Tensor a_old = basis_matrix(col, old_grids[j]);
    const Tensor a_new = basis_matrix(col, layer.grid(j));
    for (std::size_t o = 0; o < 3; ++o) {
      std::vector<double> y(120, 0.0);
      for (std::size_t b = 0; b < 120; ++b)
        for (std::size_t i = 0; i < nb; ++i) y[b] += a_old.at(b, i) * old_c[(o * 2 + j) * nb + i];
      const std::vector<double> oracle = normal_equations_solve(a_new, y);
      for (std::size_t i = 0; i < nb; ++i)
        worst = std::max(worst, std::abs(oracle[i] - layer.spline_weight().value[(o * 2 + j) * nb + i]));

      // Optimality: no worse than the old coefficients on the new basis.
      double refit = 0.0, stale = 0.0;
      for (std::size_t b = 0; b < 120; ++b) {
        double fn = 0.0, fs = 0.0;
        for (std::size_t i = 0; i < nb; ++i) {
          fn += a_new.at(b, i) * layer.spline_weight().value[(o * 2 + j) * nb + i];
          fs += a_new.at(b, i) * old_c[(o * 2 + j) * nb + i];
        }
        refit += (fn - y[b]) * (fn - y[b]);
        stale += (fs - y[b]) * (fs - y[b]);
      }
      CHECK(refit <= stale + 1e-12);
    }
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("grid update input validation") {
  KanLinear layer(2, 1, {}, 0);
  CHECK_THROWS_AS(layer.update_grid(random_tensor({5, 2}, 1), {}), DomainError);
  GridUpdateConfig no_margin;
  no_margin.margin = 0.0;
  Tensor constant({10, 2}, 0.5);
  constant.at(3, 1) = 0.7;
  try {
    layer.update_grid(constant, no_margin);
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("margin") != std::string::npos);
  }
  GridUpdateConfig bad;
  bad.epsilon = 1.5;
  CHECK_THROWS(layer.update_grid(random_tensor({10, 2}, 1), bad));
  // A constant feature is fine once a margin is given.
  CHECK_NOTHROW(layer.update_grid(constant, {}));
}

TEST_CASE("per-layer sharing gives every feature the same grid") {
  KanLinearOptions opt;
  opt.grid_sharing = GridSharing::per_layer;
  KanLinear layer(3, 2, opt, 2);
  Tensor x = random_normal({50, 3}, 3);
  for (std::size_t b = 0; b < 50; ++b) x.at(b, 2) *= 4.0;
  layer.update_grid(x, {});
  CHECK(layer.grid(0) == layer.grid(2));
  CHECK(layer.grid(0).upper() >= *std::max_element(x.data().begin(), x.data().end()));
}

TEST_CASE("update_grid is deterministic") {
  KanLinear a(3, 2, {}, 9), b(3, 2, {}, 9);
  const Tensor x = random_normal({64, 3}, 10);
  a.update_grid(x, {});
  b.update_grid(x, {});
  CHECK(a.knots() == b.knots());
  CHECK(a.spline_weight().value == b.spline_weight().value);
}

TEST_CASE("parameter count") {
  KanLinear layer(6, 4, {}, 0);
  CHECK(layer.parameter_count() == 4 * 6 * (5 + 3 + 2));
  std::size_t total = 0;
  for (Parameter* p : layer.parameters()) total += p->value.size();
  CHECK(total == layer.parameter_count());
}
