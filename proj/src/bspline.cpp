#include "kanet/bspline.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>

namespace kanet {

namespace {

// a / b with the Cox-de Boor convention 0/0 -> 0 (any division by a zero-width span vanishes).
inline double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

// Index s of the knot span holding x: t_s <= x < t_{s+1}, or the last non-empty span when x equals the
// final knot. Returns -1 outside [t_0, t_last] or when every span is empty.
std::ptrdiff_t find_span(double x, std::span<const double> t) {
  const std::size_t n = t.size();
  if (n < 2 || !(x >= t.front()) || !(x <= t.back())) return -1;
  if (x == t.back()) {
    for (std::size_t s = n - 1; s-- > 0;) {
      if (t[s] < t[s + 1]) return static_cast<std::ptrdiff_t>(s);
    }
    return -1;
  }
  const auto it = std::upper_bound(t.begin(), t.end(), x);
  return static_cast<std::ptrdiff_t>(it - t.begin()) - 1;
}

void check_order(int order) {
  if (order < 0 || order > SplineGrid::kMaxOrder) {
    throw DomainError("spline order " + std::to_string(order) + " outside [0, " +
                      std::to_string(SplineGrid::kMaxOrder) + "]");
  }
}

}  // namespace

void SplineGrid::validate() const {
  check_order(order);
  if (grid_size < 1) throw DomainError("grid size must be positive, got " + std::to_string(grid_size));
  if (knots.size() != knot_count()) {
    throw DomainError("knot vector has " + std::to_string(knots.size()) + " entries, expected " +
                      std::to_string(knot_count()));
  }
  for (std::size_t i = 0; i < knots.size(); ++i) {
    if (!std::isfinite(knots[i])) throw DomainError("non-finite knot at index " + std::to_string(i));
    if (i > 0 && knots[i] < knots[i - 1]) throw DomainError("knots decrease at index " + std::to_string(i));
  }
  if (!(upper() > lower())) throw DomainError("base interval has zero width");
}

SplineGrid uniform_grid(int grid_size, int order, double lo, double hi) {
  check_order(order);
  if (grid_size < 1) throw DomainError("grid size must be positive");
  if (!(lo < hi)) throw DomainError("uniform_grid: need lo < hi, got [" + std::to_string(lo) + ", " +
                                    std::to_string(hi) + "]");
  SplineGrid grid{order, grid_size, {}};
  const double h = (hi - lo) / grid_size;
  grid.knots.resize(grid.knot_count());
  for (int i = 0; i < static_cast<int>(grid.knots.size()); ++i) {
    grid.knots[static_cast<std::size_t>(i)] = lo + (i - order) * h;
  }
  // Pin the base interval ends exactly.
  grid.knots[static_cast<std::size_t>(order)] = lo;
  grid.knots[static_cast<std::size_t>(order + grid_size)] = hi;
  return grid;
}

SplineGrid extend_grid(std::span<const double> base_points, int order) {
  check_order(order);
  if (base_points.size() < 2) throw DomainError("extend_grid: need at least two base points");
  const int grid_size = static_cast<int>(base_points.size()) - 1;
  SplineGrid grid{order, grid_size, {}};
  grid.knots.resize(grid.knot_count());
  const double left_step = base_points[1] - base_points[0];
  const double right_step = base_points[base_points.size() - 1] - base_points[base_points.size() - 2];
  const auto k = static_cast<std::size_t>(order);
  for (std::size_t i = 0; i < base_points.size(); ++i) grid.knots[k + i] = base_points[i];
  for (std::size_t r = 1; r <= k; ++r) {
    grid.knots[k - r] = base_points.front() - static_cast<double>(r) * left_step;
    grid.knots[k + base_points.size() - 1 + r] = base_points.back() + static_cast<double>(r) * right_step;
  }
  return grid;
}

Tensor basis_matrix(std::span<const double> x, const SplineGrid& grid) {
  grid.validate();
  const std::span<const double> t = grid.knots;
  const std::size_t n_knots = t.size();
  const std::size_t n_basis = grid.basis_count();
  Tensor out({x.size(), n_basis});
  std::vector<double> level(n_knots - 1);
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double xv = x[r];
    const std::ptrdiff_t span = find_span(xv, t);
    for (std::size_t i = 0; i + 1 < n_knots; ++i) level[i] = static_cast<std::ptrdiff_t>(i) == span ? 1.0 : 0.0;
    for (int p = 1; p <= grid.order; ++p) {
      const auto pp = static_cast<std::size_t>(p);
      for (std::size_t i = 0; i + pp + 1 < n_knots; ++i) {
        level[i] = safe_ratio(xv - t[i], t[i + pp] - t[i]) * level[i] +
                   safe_ratio(t[i + pp + 1] - xv, t[i + pp + 1] - t[i + 1]) * level[i + 1];
      }
    }
    for (std::size_t i = 0; i < n_basis; ++i) out.at(r, i) = level[i];
  }
  return out;
}

Tensor basis_derivative_matrix(std::span<const double> x, const SplineGrid& grid) {
  grid.validate();
  if (grid.order < 1) throw DomainError("basis_derivative_matrix: unsupported spline order 0");
  SplineGrid lower = grid;
  lower.order = grid.order - 1;
  lower.grid_size = grid.grid_size + 2;  // same knots, one more basis function at order k - 1
  const Tensor below = basis_matrix(x, lower);
  const std::span<const double> t = grid.knots;
  const auto k = static_cast<std::size_t>(grid.order);
  const double kd = static_cast<double>(grid.order);
  Tensor out({x.size(), grid.basis_count()});
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (std::size_t i = 0; i < grid.basis_count(); ++i) {
      out.at(r, i) = kd * (safe_ratio(below.at(r, i), t[i + k] - t[i]) -
                           safe_ratio(below.at(r, i + 1), t[i + k + 1] - t[i + 1]));
    }
  }
  return out;
}

LocalBasis local_basis(double x, std::span<const double> t, int order, std::span<double> values,
                       std::span<double> derivatives) {
  const auto k = static_cast<std::size_t>(order);
  std::fill_n(values.begin(), k + 1, 0.0);
  if (!derivatives.empty()) {
    if (order < 1) throw DomainError("local_basis: derivatives need spline order >= 1");
    std::fill_n(derivatives.begin(), k + 1, 0.0);
  }
  const std::ptrdiff_t span = find_span(x, t);
  LocalBasis result{span - static_cast<std::ptrdiff_t>(k), span >= 0};
  if (span < 0) return result;

  const auto n = static_cast<std::ptrdiff_t>(t.size());
  if (span >= static_cast<std::ptrdiff_t>(k) && span <= n - static_cast<std::ptrdiff_t>(k) - 2) {
    // Interior span: triangular scheme; every denominator spans the non-empty interval [t_s, t_s+1].
    const auto s = static_cast<std::size_t>(span);
    std::array<double, SplineGrid::kMaxOrder + 1> left{};
    std::array<double, SplineGrid::kMaxOrder + 1> right{};
    double* v = values.data();
    v[0] = 1.0;
    for (std::size_t j = 1; j <= k; ++j) {
      left[j] = x - t[s + 1 - j];
      right[j] = t[s + j] - x;
      if (j == k && !derivatives.empty()) {
        // v holds degree k - 1 values for basis s - k + 1 + r.
        double carry = 0.0;
        for (std::size_t r = 0; r < k; ++r) {
          const double d = v[r] / (right[r + 1] + left[k - r]) * static_cast<double>(k);
          derivatives[r] = carry - d;
          carry = d;
        }
        derivatives[k] = carry;
      }
      double saved = 0.0;
      for (std::size_t r = 0; r < j; ++r) {
        const double temp = v[r] / (right[r + 1] + left[j - r]);
        v[r] = saved + right[r + 1] * temp;
        saved = left[j - r] * temp;
      }
      v[j] = saved;
    }
    return result;
  }

  std::array<double, SplineGrid::kMaxOrder + 1> prev{};
  std::array<double, SplineGrid::kMaxOrder + 1> cur{};
  prev[0] = 1.0;
  for (std::size_t p = 1; p <= k; ++p) {
    const auto pp = static_cast<std::ptrdiff_t>(p);
    if (p == k && !derivatives.empty()) {
      // prev holds degree k - 1 values for indices span - k + 1 + j.
      for (std::size_t j = 0; j <= k; ++j) {
        const std::ptrdiff_t i = span - pp + static_cast<std::ptrdiff_t>(j);
        if (i < 0 || i > n - pp - 2) continue;
        const auto iu = static_cast<std::size_t>(i);
        const double left = j >= 1 ? prev[j - 1] : 0.0;
        const double right = j < p ? prev[j] : 0.0;
        derivatives[j] = static_cast<double>(order) *
                         (safe_ratio(left, t[iu + p] - t[iu]) - safe_ratio(right, t[iu + p + 1] - t[iu + 1]));
      }
    }
    for (std::size_t j = 0; j <= p; ++j) {
      const std::ptrdiff_t i = span - pp + static_cast<std::ptrdiff_t>(j);
      if (i < 0 || i > n - pp - 2) {
        cur[j] = 0.0;
        continue;
      }
      const auto iu = static_cast<std::size_t>(i);
      double v = 0.0;
      if (j >= 1) v += safe_ratio(x - t[iu], t[iu + p] - t[iu]) * prev[j - 1];
      if (j < p) v += safe_ratio(t[iu + p + 1] - x, t[iu + p + 1] - t[iu + 1]) * prev[j];
      cur[j] = v;
    }
    std::swap(prev, cur);
  }
  std::copy_n(prev.begin(), k + 1, values.begin());
  return result;
}

Tensor basis_matrix_local(std::span<const double> x, const SplineGrid& grid) {
  grid.validate();
  const auto n_basis = static_cast<std::ptrdiff_t>(grid.basis_count());
  Tensor out({x.size(), grid.basis_count()});
  std::array<double, SplineGrid::kMaxOrder + 1> values{};
  for (std::size_t r = 0; r < x.size(); ++r) {
    const LocalBasis lb = local_basis(x[r], grid.knots, grid.order, values);
    if (!lb.inside) continue;
    for (int j = 0; j <= grid.order; ++j) {
      const std::ptrdiff_t i = lb.first + j;
      if (i >= 0 && i < n_basis) out.at(r, static_cast<std::size_t>(i)) = values[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

SplineFit fit_coefficients(std::span<const double> x, const Tensor& y, const SplineGrid& grid, double ridge) {
  if (!(ridge >= 0.0)) throw DomainError("fit_coefficients: ridge must be non-negative");
  if (y.rank() != 2 || y.extent(0) != x.size()) {
    throw DimensionError("fit_coefficients: targets " + shape_string(y.shape()) + " do not match " +
                         std::to_string(x.size()) + " sample points");
  }
  const Tensor basis = basis_matrix_local(x, grid);
  const auto n = static_cast<Eigen::Index>(x.size());
  const auto nb = static_cast<Eigen::Index>(grid.basis_count());
  const auto m = static_cast<Eigen::Index>(y.extent(1));
  const Eigen::Index rows = ridge > 0.0 ? n + nb : n;

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rows, nb);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(rows, m);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < nb; ++c) a(r, c) = basis.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    for (Eigen::Index c = 0; c < m; ++c) b(r, c) = y.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  }
  if (ridge > 0.0) {
    const double s = std::sqrt(ridge);
    for (Eigen::Index c = 0; c < nb; ++c) a(n + c, c) = s;
  }

  const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(a);
  const Eigen::MatrixXd solution = cod.solve(b);

  SplineFit fit;
  fit.rank = static_cast<std::size_t>(cod.rank());
  fit.rank_deficient = cod.rank() < nb;
  fit.coefficients = Tensor({static_cast<std::size_t>(nb), static_cast<std::size_t>(m)});
  for (Eigen::Index r = 0; r < nb; ++r)
    for (Eigen::Index c = 0; c < m; ++c)
      fit.coefficients.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = solution(r, c);
  require_finite(fit.coefficients, "fit_coefficients");
  return fit;
}

SplineFit fit_coefficients(std::span<const double> x, std::span<const double> y, const SplineGrid& grid,
                           double ridge) {
  if (x.size() != y.size()) {
    throw DimensionError("fit_coefficients: " + std::to_string(x.size()) + " points vs " +
                         std::to_string(y.size()) + " targets");
  }
  SplineFit fit = fit_coefficients(x, Tensor({y.size(), 1}, std::vector<double>(y.begin(), y.end())), grid, ridge);
  fit.coefficients = std::move(fit.coefficients).reshaped({grid.basis_count()});
  return fit;
}

std::vector<double> evaluate_spline(std::span<const double> x, std::span<const double> coefficients,
                                    const SplineGrid& grid) {
  if (coefficients.size() != grid.basis_count()) {
    throw DimensionError("evaluate_spline: " + std::to_string(coefficients.size()) + " coefficients for " +
                         std::to_string(grid.basis_count()) + " basis functions");
  }
  const Tensor basis = basis_matrix(x, grid);
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t i = 0; i < coefficients.size(); ++i) out[r] += basis.at(r, i) * coefficients[i];
  return out;
}

}  // namespace kanet
