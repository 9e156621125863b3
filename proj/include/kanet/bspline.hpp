#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kanet/tensor.hpp"

namespace kanet {

/// Extended knot vector of a univariate B-spline space.
///
/// Holds grid_size + 1 base grid points plus `order` extension knots on each
/// side, so knots.size() == grid_size + 2 * order + 1 and there are
/// grid_size + order basis functions. The base interval is
/// [knots[order], knots[grid_size + order]].
struct SplineGrid {
  static constexpr int kMaxOrder = 12;

  int order = 3;
  int grid_size = 5;
  std::vector<double> knots;

  std::size_t basis_count() const { return static_cast<std::size_t>(grid_size + order); }
  std::size_t knot_count() const { return static_cast<std::size_t>(grid_size + 2 * order + 1); }
  double lower() const { return knots[static_cast<std::size_t>(order)]; }
  double upper() const { return knots[static_cast<std::size_t>(grid_size + order)]; }

  /// Throws DomainError unless knots are finite, non-decreasing, of the right
  /// count, and the base interval has positive width.
  void validate() const;

  bool operator==(const SplineGrid&) const = default;
};

/// grid_size + 1 equally spaced points on [lo, hi], extended by `order`
/// knots per side at the same spacing.
SplineGrid uniform_grid(int grid_size, int order, double lo, double hi);

/// Extends grid_size + 1 base points by `order` knots per side, continuing
/// the spacing of the first and last base intervals respectively.
SplineGrid extend_grid(std::span<const double> base_points, int order);

/// n x (G + k) matrix of B_i^k(x_r) by the full Cox-de Boor recursion.
///
/// Order 0 is the half-open indicator [t_i, t_{i+1}) with the last non-empty
/// interval closed on the right; 0/0 terms from repeated knots are 0. Points
/// outside the base interval are evaluated as-is.
Tensor basis_matrix(std::span<const double> x, const SplineGrid& grid);

/// n x (G + k) matrix of dB_i^k/dx. Requires order >= 1.
Tensor basis_derivative_matrix(std::span<const double> x, const SplineGrid& grid);

/// The k + 1 possibly non-zero basis values at one point.
///
/// values[r] (and derivatives[r]) belong to basis index first + r; entries
/// whose index falls outside [0, G + k) are zero. `inside` is false when x
/// lies outside the knot vector, in which case every basis is zero.
struct LocalBasis {
  std::ptrdiff_t first = 0;
  bool inside = false;
};

/// Local Cox-de Boor evaluation touching only the k + 1 bases supported at x.
/// `values` must hold order + 1 entries; `derivatives` may be empty.
LocalBasis local_basis(double x, std::span<const double> knots, int order, std::span<double> values,
                       std::span<double> derivatives = {});

/// Same content as basis_matrix, built through local_basis.
Tensor basis_matrix_local(std::span<const double> x, const SplineGrid& grid);

struct SplineFit {
  /// (G + k) x m coefficients, one column per right-hand side.
  Tensor coefficients;
  std::size_t rank = 0;
  /// Set when the design matrix lacks full column rank (ridge == 0 only);
  /// the minimum-norm solution is returned in that case.
  bool rank_deficient = false;
};

/// Solves min ||A c - y||^2 + ridge ||c||^2 with A = basis_matrix(x, grid)
/// for each column of y (n x m) by complete orthogonal decomposition.
SplineFit fit_coefficients(std::span<const double> x, const Tensor& y, const SplineGrid& grid, double ridge = 0.0);

/// Single right-hand side convenience overload; coefficients has shape [G + k].
SplineFit fit_coefficients(std::span<const double> x, std::span<const double> y, const SplineGrid& grid,
                           double ridge = 0.0);

/// basis_matrix(x) * c for c of length G + k.
std::vector<double> evaluate_spline(std::span<const double> x, std::span<const double> coefficients,
                                    const SplineGrid& grid);

}  // namespace kanet
