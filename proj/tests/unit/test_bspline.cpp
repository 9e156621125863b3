#include <cmath>
#include <numbers>

#include "doctest.h"
#include "kanet/bspline.hpp"
#include "test_support.hpp"

using namespace kanet;
using kanet::testing::normal_equations_solve;
using kanet::testing::rms;

namespace {

std::vector<double> uniform_points(const SplineGrid& g, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (double& v : x) v = rng.uniform(g.lower(), g.upper());
  return x;
}

double residual_norm(const Tensor& a, std::span<const double> c, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t r = 0; r < a.extent(0); ++r) {
    double v = -y[r];
    for (std::size_t i = 0; i < c.size(); ++i) v += a.at(r, i) * c[i];
    s += v * v;
  }
  return s;
}

}  // namespace

TEST_CASE("uniform_grid examples") {
  const SplineGrid a = uniform_grid(2, 1, 0.0, 1.0);
  CHECK(a.knots == std::vector<double>{-0.5, 0.0, 0.5, 1.0, 1.5});

  const SplineGrid b = uniform_grid(5, 3, -1.0, 1.0);
  REQUIRE(b.knots.size() == 12);
  CHECK(b.knots.front() == doctest::Approx(-2.2));
  for (std::size_t i = 1; i < b.knots.size(); ++i) CHECK(b.knots[i] - b.knots[i - 1] == doctest::Approx(0.4));
  CHECK(b.basis_count() == 8);

  CHECK(uniform_grid(1, 0, 2.0, 3.0).knots == std::vector<double>{2.0, 3.0});
  CHECK_THROWS_AS(uniform_grid(3, 1, 1.0, 1.0), DomainError);
  CHECK_THROWS_AS(uniform_grid(3, 1, 2.0, 1.0), DomainError);
}

TEST_CASE("extend_grid continues boundary spacing") {
  const std::vector<double> base{0.0, 0.1, 0.5, 2.0};
  const SplineGrid g = extend_grid(base, 2);
  CHECK(g.knots == std::vector<double>{-0.2, -0.1, 0.0, 0.1, 0.5, 2.0, 3.5, 5.0});
  g.validate();
}

TEST_CASE("grid validation") {
  SplineGrid g = uniform_grid(3, 2, 0.0, 1.0);
  g.knots[4] = g.knots[3] - 0.1;
  CHECK_THROWS_AS(g.validate(), DomainError);
  SplineGrid flat{1, 2, {0.0, 0.0, 0.0, 0.0, 0.0}};
  CHECK_THROWS_AS(flat.validate(), DomainError);
}

TEST_CASE("order-0 basis is an indicator") {
  const SplineGrid g{0, 2, {0.0, 1.0, 2.0}};
  const std::vector<double> x{0.5, 1.0, 2.0};
  const Tensor b = basis_matrix(x, g);
  CHECK(b == Tensor::matrix({{1, 0}, {0, 1}, {0, 1}}));  // right end closes the last interval
}

TEST_CASE("linear basis by one recursion step") {
  const std::vector<double> x{0.25};
  const Tensor b = basis_matrix(x, uniform_grid(2, 1, 0.0, 1.0));
  CHECK(b.at(0, 0) == doctest::Approx(0.5));
  CHECK(b.at(0, 1) == doctest::Approx(0.5));
  CHECK(b.at(0, 2) == 0.0);
}

TEST_CASE("cubic basis sums to one at an interior point and the right end") {
  const SplineGrid g = uniform_grid(5, 3, -1.0, 1.0);
  const std::vector<double> x{0.3, 1.0, -1.0};
  const Tensor b = basis_matrix(x, g);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < g.basis_count(); ++i) s += b.at(r, i);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("partition of unity, local support and non-negativity") {
  for (int gsize : {3, 5, 8})
    for (int k : {1, 2, 3}) {
      const SplineGrid g = uniform_grid(gsize, k, -1.0, 1.0);
      const auto x = uniform_points(g, 1000, static_cast<std::uint64_t>(gsize * 10 + k));
      const Tensor b = basis_matrix(x, g);
      double worst = 0.0;
      bool support_ok = true, nonneg = true;
      for (std::size_t r = 0; r < x.size(); ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < g.basis_count(); ++i) {
          const double v = b.at(r, i);
          s += v;
          nonneg &= v >= 0.0;
          if (x[r] < g.knots[i] || x[r] > g.knots[i + static_cast<std::size_t>(k) + 1]) support_ok &= v == 0.0;
        }
        worst = std::max(worst, std::abs(s - 1.0));
      }
      CHECK(worst < 1e-10);
      CHECK(support_ok);
      CHECK(nonneg);
    }
}

TEST_CASE("local evaluation matches the full recursion, including repeated knots and the extension region") {
  std::vector<SplineGrid> grids{uniform_grid(5, 3, -1.0, 1.0), uniform_grid(3, 1, 0.0, 2.0)};
  grids.push_back(extend_grid(std::vector<double>{0.0, 0.0, 0.3, 0.3, 0.9, 1.0}, 2));  // repeated knots
  for (const SplineGrid& g : grids) {
    Rng rng(42);
    std::vector<double> x(300);
    for (double& v : x) v = rng.uniform(g.knots.front() - 0.3, g.knots.back() + 0.3);
    x.push_back(g.knots.back());
    x.push_back(g.knots.front());
    CHECK(max_abs_difference(basis_matrix(x, g), basis_matrix_local(x, g)) < 1e-14);
  }
}

TEST_CASE("basis derivatives") {
  const SplineGrid g0{0, 2, {0.0, 1.0, 2.0}};
  CHECK_THROWS_AS(basis_derivative_matrix(std::vector<double>{0.5}, g0), DomainError);

  SUBCASE("rows sum to zero inside the base interval") {
    const SplineGrid g = uniform_grid(5, 3, -1.0, 1.0);
    const auto x = uniform_points(g, 200, 3);
    const Tensor d = basis_derivative_matrix(x, g);
    for (std::size_t r = 0; r < x.size(); ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < g.basis_count(); ++i) s += d.at(r, i);
      CHECK(std::abs(s) < 1e-10);
    }
  }

  SUBCASE("finite-difference oracle") {
    for (int k : {1, 2, 3}) {
      const SplineGrid g = uniform_grid(6, k, -1.0, 1.0);
      auto x = uniform_points(g, 300, static_cast<std::uint64_t>(k));
      const double h = 1e-6;
      // Keep stencils inside one knot span so the piecewise polynomial is smooth there.
      std::erase_if(x, [&](double v) {
        for (double t : g.knots)
          if (std::abs(v - t) < 4 * h) return true;
        return false;
      });
      std::vector<double> xp(x), xm(x);
      for (auto& v : xp) v += h;
      for (auto& v : xm) v -= h;
      const Tensor d = basis_derivative_matrix(x, g);
      const Tensor bp = basis_matrix(xp, g), bm = basis_matrix(xm, g);
      double worst = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double fd = (bp[i] - bm[i]) / (2 * h);
        worst = std::max(worst, std::abs(fd - d[i]) / std::max({std::abs(fd), std::abs(d[i]), 1.0}));
      }
      CHECK(worst < 1e-6);
    }
  }

  SUBCASE("hat slopes") {
    const SplineGrid g = uniform_grid(4, 1, 0.0, 1.0);  // spacing 0.25, B_1 peaks at t_2 = 0.25
    const std::vector<double> x{0.1, 0.4};
    const Tensor d = basis_derivative_matrix(x, g);
    CHECK(d.at(0, 1) == doctest::Approx(4.0));
    CHECK(d.at(1, 1) == doctest::Approx(-4.0));
  }
}

TEST_CASE("fit_coefficients recovers constructed coefficients") {
  const SplineGrid g = uniform_grid(5, 3, -1.0, 1.0);
  const auto x = uniform_points(g, 200, 17);
  Rng rng(18);
  std::vector<double> truth(g.basis_count());
  for (double& c : truth) c = rng.normal();
  const std::vector<double> y = evaluate_spline(x, truth, g);
  const SplineFit fit = fit_coefficients(x, y, g);
  CHECK_FALSE(fit.rank_deficient);
  std::vector<double> err(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) err[i] = fit.coefficients[i] - truth[i];
  CHECK(rms(err) < 1e-8);

  const SplineFit zero = fit_coefficients(x, std::vector<double>(x.size(), 0.0), g);
  for (double c : zero.coefficients.data()) CHECK(c == 0.0);
}

TEST_CASE("fit matches normal equations and is locally optimal") {
  const SplineGrid g = uniform_grid(6, 3, -1.0, 1.0);
  const auto x = uniform_points(g, 150, 5);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::exp(x[i]) * std::cos(3 * x[i]);
  const SplineFit fit = fit_coefficients(x, y, g);
  const Tensor a = basis_matrix(x, g);
  const auto oracle = normal_equations_solve(a, y);
  for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(fit.coefficients[i] == doctest::Approx(oracle[i]).epsilon(1e-8));

  const double best = residual_norm(a, fit.coefficients.data(), y);
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> c(fit.coefficients.data().begin(), fit.coefficients.data().end());
    for (double& v : c) v += rng.normal(0.0, 1e-3);
    CHECK(residual_norm(a, c, y) >= best);
  }
}

TEST_CASE("ridge shrinks the solution") {
  const SplineGrid g = uniform_grid(5, 3, -1.0, 1.0);
  const auto x = uniform_points(g, 100, 9);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::sin(4 * x[i]);
  const auto plain = fit_coefficients(x, y, g, 0.0).coefficients;
  const auto ridged = fit_coefficients(x, y, g, 10.0).coefficients;
  double n0 = 0, n1 = 0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    n0 += plain[i] * plain[i];
    n1 += ridged[i] * ridged[i];
  }
  CHECK(n1 < n0);
  CHECK_THROWS_AS(fit_coefficients(x, y, g, -1.0), DomainError);
}

TEST_CASE("rank-deficient fit returns the minimum-norm solution and flags it") {
  const SplineGrid g = uniform_grid(5, 3, -1.0, 1.0);  // 8 bases
  const std::vector<double> x{-0.9, -0.3, 0.2, 0.7};   // 4 samples
  const std::vector<double> y{1.0, -2.0, 0.5, 3.0};
  const SplineFit fit = fit_coefficients(x, y, g);
  CHECK(fit.rank_deficient);
  CHECK(fit.rank == 4);
  // Oracle: c = A^T (A A^T)^{-1} y.
  const Tensor a = basis_matrix(x, g);
  const Tensor aat = matmul(a, transpose(a));
  const auto z = kanet::testing::cholesky_solve(std::vector<double>(aat.data().begin(), aat.data().end()), y, 4);
  for (std::size_t i = 0; i < 8; ++i) {
    double expected = 0.0;
    for (std::size_t r = 0; r < 4; ++r) expected += a.at(r, i) * z[r];
    CHECK(fit.coefficients[i] == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("finer grids approximate a smooth function better") {
  auto residual = [](int gsize) {
    const SplineGrid g = uniform_grid(gsize, 3, -1.0, 1.0);
    std::vector<double> x(400), y(400);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = -1.0 + 2.0 * static_cast<double>(i) / 399.0;
      y[i] = std::sin(std::numbers::pi * x[i]);
    }
    const auto fit = fit_coefficients(x, y, g);
    const auto pred = evaluate_spline(x, fit.coefficients.data(), g);
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = pred[i] - y[i];
    return rms(r);
  };
  CHECK(residual(20) < residual(5) / 10.0);
}

TEST_CASE("evaluate_spline") {
  const SplineGrid g = uniform_grid(5, 2, 0.0, 1.0);
  const auto x = uniform_points(g, 50, 21);
  for (double v : evaluate_spline(x, std::vector<double>(g.basis_count(), 1.0), g)) CHECK(v == doctest::Approx(1.0));

  const Tensor b = basis_matrix(x, g);
  std::vector<double> onehot(g.basis_count(), 0.0);
  onehot[3] = 1.0;
  const auto col = evaluate_spline(x, onehot, g);
  for (std::size_t r = 0; r < x.size(); ++r) CHECK(col[r] == b.at(r, 3));

  CHECK_THROWS_AS(evaluate_spline(x, std::vector<double>(3, 1.0), g), DimensionError);

  Rng rng(4);
  std::vector<double> c(g.basis_count());
  for (double& v : c) v = rng.normal();
  const auto y = evaluate_spline(x, c, g);
  const auto back = evaluate_spline(x, fit_coefficients(x, y, g).coefficients.data(), g);
  for (std::size_t r = 0; r < x.size(); ++r) CHECK(std::abs(back[r] - y[r]) < 1e-8);
}
