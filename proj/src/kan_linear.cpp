#include "kanet/kan_linear.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "kanet/parallel.hpp"
#include "kanet/random.hpp"

namespace kanet {

namespace {

constexpr std::size_t kRowsPerChunk = 256;
constexpr std::size_t kMaxChunks = 64;

std::size_t chunk_count(std::size_t rows) {
  return std::clamp<std::size_t>((rows + kRowsPerChunk - 1) / kRowsPerChunk, 1, kMaxChunks);
}

std::pair<std::size_t, std::size_t> chunk_range(std::size_t chunk, std::size_t chunks, std::size_t rows) {
  return {rows * chunk / chunks, rows * (chunk + 1) / chunks};
}

}  // namespace

void GridUpdateConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw DomainError("grid update: epsilon must lie in [0, 1]");
  if (!(margin >= 0.0)) throw DomainError("grid update: margin must be non-negative");
  if (!(refit_ridge >= 0.0)) throw DomainError("grid update: refit ridge must be non-negative");
}

// Basis data of one input value: the contiguous run of non-zero-capable
// coefficients [start, start + count) and their basis values / derivatives.
struct KanLinear::FeatureEval {
  double act = 0.0;
  double dact = 0.0;
  std::size_t start = 0;
  std::size_t count = 0;
  std::array<double, SplineGrid::kMaxOrder + 1> values{};
  std::array<double, SplineGrid::kMaxOrder + 1> derivs{};
};

KanLinear::KanLinear(std::size_t in_features, std::size_t out_features, const KanLinearOptions& options,
                     std::uint64_t seed)
    : in_(in_features), out_(out_features), options_(options) {
  if (in_ == 0 || out_ == 0) throw DimensionError("KanLinear needs positive in/out features");
  if (options_.spline_order < 1) throw DomainError("KanLinear needs spline order >= 1");
  if (options_.grid_group == 0) throw DomainError("KanLinear needs grid_group >= 1");
  const SplineGrid initial = uniform_grid(options_.grid_size, options_.spline_order, options_.grid_lo, options_.grid_hi);
  const std::size_t nb = basis_count();

  knots_ = Tensor({in_, knot_count()});
  for (std::size_t j = 0; j < in_; ++j) std::copy(initial.knots.begin(), initial.knots.end(), knots_.data().begin() + static_cast<std::ptrdiff_t>(j * knot_count()));

  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  Tensor wb({out_, in_});
  for (double& w : wb.data()) w = rng.uniform(-bound, bound);
  base_weight_ = Parameter("base_weight", std::move(wb));
  spline_scaler_ = Parameter("spline_scaler", Tensor({out_, in_}, 1.0));

  // Fit all edges at once: they share the initial grid and sample points.
  const auto g = static_cast<std::size_t>(options_.grid_size);
  std::vector<double> points(initial.knots.begin() + options_.spline_order,
                             initial.knots.begin() + options_.spline_order + options_.grid_size + 1);
  Tensor noise({g + 1, in_ * out_});
  for (double& v : noise.data()) v = (rng.uniform() - 0.5) * options_.noise_scale / static_cast<double>(g);
  const SplineFit fit = fit_coefficients(points, noise, initial);
  Tensor c({out_, in_, nb});
  for (std::size_t o = 0; o < out_; ++o)
    for (std::size_t j = 0; j < in_; ++j)
      for (std::size_t i = 0; i < nb; ++i) c[(o * in_ + j) * nb + i] = fit.coefficients.at(i, j * out_ + o);
  spline_weight_ = Parameter("spline_weight", std::move(c), ParamKind::spline_coefficients);
}

SplineGrid KanLinear::grid(std::size_t feature) const {
  if (feature >= in_) throw DimensionError("KanLinear::grid: feature index out of range");
  SplineGrid g{options_.spline_order, options_.grid_size, {}};
  const auto row = knots_.data().subspan(feature * knot_count(), knot_count());
  g.knots.assign(row.begin(), row.end());
  return g;
}

void KanLinear::set_grid(std::size_t feature, const SplineGrid& grid) {
  if (feature >= in_) throw DimensionError("KanLinear::set_grid: feature index out of range");
  if (grid.order != options_.spline_order || grid.grid_size != options_.grid_size) {
    throw DimensionError("KanLinear::set_grid: grid geometry does not match the layer");
  }
  grid.validate();
  const std::size_t first = grid_owner(feature);
  const std::size_t last = options_.grid_sharing == GridSharing::per_feature ? first + 1
                           : options_.grid_sharing == GridSharing::per_layer ? in_
                                                                             : std::min(in_, first + options_.grid_group);
  for (std::size_t j = first; j < last; ++j)
    std::copy(grid.knots.begin(), grid.knots.end(), knots_.data().begin() + static_cast<std::ptrdiff_t>(j * knot_count()));
}

std::size_t KanLinear::grid_owner(std::size_t feature) const {
  switch (options_.grid_sharing) {
    case GridSharing::per_feature: return feature;
    case GridSharing::per_group: return feature - feature % options_.grid_group;
    case GridSharing::per_layer: return 0;
  }
  return feature;
}

void KanLinear::visit_state(const std::string& prefix, const StateVisitor& visit) {
  visit(prefix + "base_weight", base_weight_.value);
  visit(prefix + "spline_weight", spline_weight_.value);
  visit(prefix + "spline_scaler", spline_scaler_.value);
  visit(prefix + "knots", knots_);
}

void KanLinear::evaluate_feature(std::size_t j, double x, FeatureEval& f, bool with_derivative) const {
  if (options_.base_activation == BaseActivation::silu) {
    f.act = silu(x);
    f.dact = with_derivative ? silu_derivative(x) : 0.0;
  } else {
    f.act = x;
    f.dact = 1.0;
  }
  const auto k = static_cast<std::size_t>(options_.spline_order);
  const auto knots = knots_.data().subspan(j * knot_count(), knot_count());
  std::array<double, SplineGrid::kMaxOrder + 1> vals{};
  std::array<double, SplineGrid::kMaxOrder + 1> dvals{};
  const LocalBasis lb = local_basis(x, knots, options_.spline_order, std::span(vals.data(), k + 1),
                                    with_derivative ? std::span(dvals.data(), k + 1) : std::span<double>{});
  f.count = 0;
  if (!lb.inside) return;
  const auto nb = static_cast<std::ptrdiff_t>(basis_count());
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(lb.first, 0);
  const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(lb.first + static_cast<std::ptrdiff_t>(k) + 1, nb);
  if (hi <= lo) return;
  f.start = static_cast<std::size_t>(lo);
  f.count = static_cast<std::size_t>(hi - lo);
  const auto shift = static_cast<std::size_t>(lo - lb.first);
  for (std::size_t r = 0; r < f.count; ++r) {
    f.values[r] = vals[shift + r];
    f.derivs[r] = dvals[shift + r];
  }
}

Tensor KanLinear::forward(const Tensor& x, Mode) {
  if (x.rank() != 2 || x.extent(1) != in_) {
    throw DimensionError("KanLinear forward: expected [B, " + std::to_string(in_) + "], got " + shape_string(x.shape()));
  }
  input_ = x;
  const std::size_t rows = x.extent(0);
  const std::size_t nb = basis_count();
  Tensor y({rows, out_});
  const double* wb = base_weight_.value.data().data();
  const double* ws = spline_scaler_.value.data().data();
  const double* c = spline_weight_.value.data().data();
  const std::size_t chunks = chunk_count(rows);
  parallel_for(chunks, [&](std::size_t chunk) {
    std::vector<FeatureEval> feats(in_);
    const auto [begin, end] = chunk_range(chunk, chunks, rows);
    for (std::size_t b = begin; b < end; ++b) {
      for (std::size_t j = 0; j < in_; ++j) evaluate_feature(j, x.at(b, j), feats[j], false);
      for (std::size_t o = 0; o < out_; ++o) {
        double acc = 0.0;
        const double* wb_row = wb + o * in_;
        const double* ws_row = ws + o * in_;
        const double* c_row = c + o * in_ * nb;
        for (std::size_t j = 0; j < in_; ++j) {
          const FeatureEval& f = feats[j];
          const double* cj = c_row + j * nb + f.start;
          double spline = 0.0;
          for (std::size_t r = 0; r < f.count; ++r) spline += cj[r] * f.values[r];
          acc += wb_row[j] * f.act + ws_row[j] * spline;
        }
        y.at(b, o) = acc;
      }
    }
  });
  require_finite(y, "KanLinear forward");
  return y;
}

Tensor KanLinear::backward(const Tensor& dy) {
  const std::size_t rows = input_.extent(0);
  require_shape(dy, {rows, out_}, "KanLinear backward upstream");
  const std::size_t nb = basis_count();
  const std::size_t n_edges = out_ * in_;
  Tensor dx({rows, in_});
  const double* wb = base_weight_.value.data().data();
  const double* ws = spline_scaler_.value.data().data();
  const double* c = spline_weight_.value.data().data();

  const std::size_t chunks = chunk_count(rows);
  // Per-chunk gradient buffers: [dwb | dws | dc], reduced in chunk order.
  std::vector<std::vector<double>> partial(chunks);
  parallel_for(chunks, [&](std::size_t chunk) {
    std::vector<double>& acc = partial[chunk];
    acc.assign(n_edges * (2 + nb), 0.0);
    double* dwb = acc.data();
    double* dws = dwb + n_edges;
    double* dc = dws + n_edges;
    std::vector<FeatureEval> feats(in_);
    const auto [begin, end] = chunk_range(chunk, chunks, rows);
    for (std::size_t b = begin; b < end; ++b) {
      for (std::size_t j = 0; j < in_; ++j) evaluate_feature(j, input_.at(b, j), feats[j], true);
      double* dx_row = &dx.at(b, 0);
      for (std::size_t o = 0; o < out_; ++o) {
        const double g = dy.at(b, o);
        if (g == 0.0) continue;
        const std::size_t edge0 = o * in_;
        for (std::size_t j = 0; j < in_; ++j) {
          const FeatureEval& f = feats[j];
          const std::size_t e = edge0 + j;
          const double* ce = c + e * nb + f.start;
          double* dce = dc + e * nb + f.start;
          double spline = 0.0;
          double dspline = 0.0;
          const double gs = g * ws[e];
          for (std::size_t r = 0; r < f.count; ++r) {
            spline += ce[r] * f.values[r];
            dspline += ce[r] * f.derivs[r];
            dce[r] += gs * f.values[r];
          }
          dwb[e] += g * f.act;
          dws[e] += g * spline;
          dx_row[j] += g * (wb[e] * f.dact + ws[e] * dspline);
        }
      }
    }
  });
  double* gwb = base_weight_.grad.data().data();
  double* gws = spline_scaler_.grad.data().data();
  double* gc = spline_weight_.grad.data().data();
  for (const auto& acc : partial) {
    for (std::size_t e = 0; e < n_edges; ++e) {
      gwb[e] += acc[e];
      gws[e] += acc[n_edges + e];
    }
    const double* dc = acc.data() + 2 * n_edges;
    for (std::size_t i = 0; i < n_edges * nb; ++i) gc[i] += dc[i];
  }
  return dx;
}

BasisTable KanLinear::tabulate(std::span<const double> x, std::span<const std::uint32_t> feature,
                               bool with_derivatives) const {
  if (x.size() != feature.size()) throw DimensionError("KanLinear tabulate: values and features differ in length");
  const std::size_t n = x.size();
  const std::size_t stride = static_cast<std::size_t>(options_.spline_order) + 1;
  const std::size_t last_start = basis_count() - stride;
  BasisTable t;
  t.stride = stride;
  t.act.resize(n);
  t.dact.resize(n);
  t.start.resize(n);
  t.values.assign(n * stride, 0.0);
  if (with_derivatives) t.derivs.assign(n * stride, 0.0);
  const std::size_t chunks = chunk_count(n);
  parallel_for(chunks, [&](std::size_t chunk) {
    FeatureEval f;
    const auto [begin, end] = chunk_range(chunk, chunks, n);
    for (std::size_t i = begin; i < end; ++i) {
      if (feature[i] >= in_) throw DimensionError("KanLinear tabulate: feature index out of range");
      if (!std::isfinite(x[i])) throw NumericError("KanLinear tabulate: non-finite input at entry " + std::to_string(i));
      evaluate_feature(feature[i], x[i], f, with_derivatives);
      t.act[i] = f.act;
      t.dact[i] = f.dact;
      // Slide the window left at the upper end so it stays inside the coefficient row.
      const std::size_t start = f.count == 0 ? 0 : std::min(f.start, last_start);
      t.start[i] = static_cast<std::uint32_t>(start);
      const std::size_t offset = f.count == 0 ? 0 : f.start - start;
      std::copy_n(f.values.begin(), f.count, t.values.begin() + static_cast<std::ptrdiff_t>(i * stride + offset));
      if (with_derivatives) {
        std::copy_n(f.derivs.begin(), f.count, t.derivs.begin() + static_cast<std::ptrdiff_t>(i * stride + offset));
      }
    }
  });
  return t;
}

namespace {

// Edge parameters re-laid out input-major with the output index fastest
// ([in][...][out]) so the per-entry updates are contiguous over outputs.
struct InputMajor {
  std::vector<double> wb;   // [in][out]
  std::vector<double> ws;   // [in][out]
  std::vector<double> c;    // [in][nb][out]
  std::vector<double> eff;  // ws * c, [in][nb][out]
};

InputMajor input_major(const Tensor& wb, const Tensor& ws, const Tensor& c, std::size_t in, std::size_t out,
                       std::size_t nb) {
  InputMajor m;
  m.wb.resize(in * out);
  m.ws.resize(in * out);
  m.c.resize(in * out * nb);
  m.eff.resize(in * out * nb);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t j = 0; j < in; ++j) {
      const std::size_t e = o * in + j;
      m.wb[j * out + o] = wb[e];
      m.ws[j * out + o] = ws[e];
      for (std::size_t i = 0; i < nb; ++i) {
        m.c[(j * nb + i) * out + o] = c[e * nb + i];
        m.eff[(j * nb + i) * out + o] = ws[e] * c[e * nb + i];
      }
    }
  return m;
}

struct IndexedArgs {
  const BasisTable& table;
  const std::uint32_t* index;
  const InputMajor& m;
  std::size_t in, out, nb;
};

// Each output lane sees the same operation sequence in every clone (no FMA
// contraction), so the AVX2 clone is bitwise identical to the baseline one.
template <std::size_t S, std::size_t O>
void forward_rows(const IndexedArgs& a, std::size_t begin, std::size_t end, double* y) {
  const std::size_t stride = S ? S : a.table.stride, out = O ? O : a.out;
  std::vector<double> tmp_buffer(out);
  double* __restrict tmp = tmp_buffer.data();
  for (std::size_t b = begin; b < end; ++b) {
    double* __restrict yr = y + b * out;
    const std::uint32_t* idx = a.index + b * a.in;
    for (std::size_t j = 0; j < a.in; ++j) {
      const std::size_t i = idx[j];
      const double act = a.table.act[i];
      const double* v = a.table.values.data() + i * stride;
      const double* __restrict w = a.m.wb.data() + j * out;
      const double* __restrict e = a.m.eff.data() + (j * a.nb + a.table.start[i]) * out;
      for (std::size_t o = 0; o < out; ++o) tmp[o] = w[o] * act;
      for (std::size_t r = 0; r < stride; ++r) {
        const double vr = v[r];
        const double* __restrict er = e + r * out;
        for (std::size_t o = 0; o < out; ++o) tmp[o] += er[o] * vr;
      }
      for (std::size_t o = 0; o < out; ++o) yr[o] += tmp[o];
    }
  }
}

template <std::size_t S, std::size_t O>
void backward_rows(const IndexedArgs& a, std::size_t begin, std::size_t end, const double* dy, double* acc,
                   double* dcols) {
  const std::size_t stride = S ? S : a.table.stride, out = O ? O : a.out, nb = a.nb;
  const std::size_t n_edges = a.in * out;
  double* __restrict dwb = acc;
  double* __restrict dws = acc + n_edges;
  double* __restrict dc = acc + 2 * n_edges;
  std::vector<double> buffer(3 * out);
  double* __restrict spline = buffer.data();
  double* __restrict dspline = spline + out;
  double* __restrict gws = dspline + out;
  for (std::size_t b = begin; b < end; ++b) {
    const double* __restrict g = dy + b * out;
    const std::uint32_t* idx = a.index + b * a.in;
    for (std::size_t j = 0; j < a.in; ++j) {
      const std::size_t i = idx[j];
      const double act = a.table.act[i];
      const double dact = a.table.dact[i];
      const std::size_t base = (j * nb + a.table.start[i]) * out;
      const double* v = a.table.values.data() + i * stride;
      const double* dv = a.table.derivs.data() + i * stride;
      const double* __restrict w = a.m.wb.data() + j * out;
      const double* __restrict s = a.m.ws.data() + j * out;
      for (std::size_t o = 0; o < out; ++o) {
        spline[o] = 0.0;
        dspline[o] = 0.0;
        gws[o] = g[o] * s[o];
      }
      for (std::size_t r = 0; r < stride; ++r) {
        const double vr = v[r], dvr = dv[r];
        const double* __restrict cr = a.m.c.data() + base + r * out;
        const double* __restrict er = a.m.eff.data() + base + r * out;
        double* __restrict dcr = dc + base + r * out;
        for (std::size_t o = 0; o < out; ++o) {
          spline[o] += cr[o] * vr;
          dspline[o] += er[o] * dvr;
          dcr[o] += gws[o] * vr;
        }
      }
      double* __restrict dwb_j = dwb + j * out;
      double* __restrict dws_j = dws + j * out;
      for (std::size_t o = 0; o < out; ++o) {
        dwb_j[o] += g[o] * act;
        dws_j[o] += g[o] * spline[o];
      }
      double dx = 0.0;
      for (std::size_t o = 0; o < out; ++o) dx += g[o] * (w[o] * dact + dspline[o]);
      dcols[b * a.in + j] = dx;
    }
  }
}

// Picks a kernel instantiation: cubic splines with common output widths get
// compile-time trip counts, everything else the runtime-sized loops.
template <typename F>
void dispatch(std::size_t stride, std::size_t out, F&& f) {
  if (stride == 4) {
    switch (out) {
      case 2: return f.template operator()<4, 2>();
      case 4: return f.template operator()<4, 4>();
      case 8: return f.template operator()<4, 8>();
      case 16: return f.template operator()<4, 16>();
      case 32: return f.template operator()<4, 32>();
      default: return f.template operator()<4, 0>();
    }
  }
  f.template operator()<0, 0>();
}

}  // namespace

Tensor KanLinear::forward_indexed(const BasisTable& table, std::span<const std::uint32_t> index,
                                  std::size_t rows) const {
  if (index.size() != rows * in_) throw DimensionError("KanLinear forward_indexed: index size mismatch");
  const std::size_t nb = basis_count();
  const InputMajor m = input_major(base_weight_.value, spline_scaler_.value, spline_weight_.value, in_, out_, nb);
  const IndexedArgs args{table, index.data(), m, in_, out_, nb};
  Tensor y({rows, out_});
  double* yd = y.data().data();
  const std::size_t chunks = chunk_count(rows);
  parallel_for(chunks, [&](std::size_t chunk) {
    const auto [begin, end] = chunk_range(chunk, chunks, rows);
    dispatch(table.stride, out_, [&]<std::size_t S, std::size_t O>() { forward_rows<S, O>(args, begin, end, yd); });
  });
  require_finite(y, "KanLinear forward");
  return y;
}

std::vector<double> KanLinear::backward_indexed(const BasisTable& table, std::span<const std::uint32_t> index,
                                                const Tensor& dy) {
  const std::size_t rows = dy.rank() == 2 ? dy.extent(0) : 0;
  require_shape(dy, {rows, out_}, "KanLinear backward_indexed upstream");
  if (index.size() != rows * in_) throw DimensionError("KanLinear backward_indexed: index size mismatch");
  if (table.derivs.size() != table.values.size()) throw DomainError("KanLinear backward_indexed: table lacks derivatives");
  const std::size_t nb = basis_count();
  const std::size_t n_edges = out_ * in_;
  const InputMajor m = input_major(base_weight_.value, spline_scaler_.value, spline_weight_.value, in_, out_, nb);
  const IndexedArgs args{table, index.data(), m, in_, out_, nb};

  // Gradient per (row, input) first; scattered to table entries afterwards in a fixed order.
  std::vector<double> dcols(rows * in_, 0.0);
  const std::size_t chunks = chunk_count(rows);
  std::vector<std::vector<double>> partial(chunks);  // [dwb | dws | dc], input-major
  const double* dyd = dy.data().data();
  parallel_for(chunks, [&](std::size_t chunk) {
    std::vector<double>& acc = partial[chunk];
    acc.assign(n_edges * (2 + nb), 0.0);
    const auto [begin, end] = chunk_range(chunk, chunks, rows);
    dispatch(table.stride, out_, [&]<std::size_t S, std::size_t O>() {
      backward_rows<S, O>(args, begin, end, dyd, acc.data(), dcols.data());
    });
  });

  double* gwb = base_weight_.grad.data().data();
  double* gws = spline_scaler_.grad.data().data();
  double* gc = spline_weight_.grad.data().data();
  for (const auto& acc : partial) {
    const double* dc = acc.data() + 2 * n_edges;
    for (std::size_t o = 0; o < out_; ++o)
      for (std::size_t j = 0; j < in_; ++j) {
        const std::size_t e = o * in_ + j;
        gwb[e] += acc[j * out_ + o];
        gws[e] += acc[n_edges + j * out_ + o];
        for (std::size_t i = 0; i < nb; ++i) gc[e * nb + i] += dc[(j * nb + i) * out_ + o];
      }
  }
  std::vector<double> dentries(table.size(), 0.0);
  for (std::size_t r = 0; r < rows * in_; ++r) dentries[index[r]] += dcols[r];
  return dentries;
}

Tensor KanLinear::spline_branch(const Tensor& x) const {
  if (x.rank() != 2 || x.extent(1) != in_) throw DimensionError("KanLinear spline_branch: bad input shape");
  const std::size_t rows = x.extent(0);
  const std::size_t nb = basis_count();
  Tensor y({rows, out_});
  std::vector<FeatureEval> feats(in_);
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t j = 0; j < in_; ++j) evaluate_feature(j, x.at(b, j), feats[j], false);
    for (std::size_t o = 0; o < out_; ++o) {
      double acc = 0.0;
      for (std::size_t j = 0; j < in_; ++j) {
        const FeatureEval& f = feats[j];
        const std::size_t e = o * in_ + j;
        double spline = 0.0;
        for (std::size_t r = 0; r < f.count; ++r) spline += spline_weight_.value[e * nb + f.start + r] * f.values[r];
        acc += spline_scaler_.value[e] * spline;
      }
      y.at(b, o) = acc;
    }
  }
  return y;
}

namespace {

// Quantile grid blended with the margin-padded uniform grid over the sample range.
std::vector<double> blended_grid_points(std::vector<double> samples, int grid_size, const GridUpdateConfig& cfg,
                                        const std::string& where) {
  std::stable_sort(samples.begin(), samples.end());
  const double lo = samples.front();
  const double hi = samples.back();
  if (!(hi > lo) && cfg.margin == 0.0) {
    throw DomainError(where + ": input is constant, so the grid span is degenerate; use a margin > 0");
  }
  const auto g = static_cast<std::size_t>(grid_size);
  const double last_rank = static_cast<double>(samples.size() - 1);
  const double span = hi - lo + 2.0 * cfg.margin;
  std::vector<double> points(g + 1);
  for (std::size_t i = 0; i <= g; ++i) {
    const auto rank = static_cast<std::size_t>(std::lround(static_cast<double>(i) * last_rank / static_cast<double>(g)));
    const double adaptive = samples[rank];
    const double uniform = static_cast<double>(i) * span / static_cast<double>(grid_size) + lo - cfg.margin;
    points[i] = cfg.epsilon * uniform + (1.0 - cfg.epsilon) * adaptive;
  }
  // Both components bracket [lo, hi]; rounding in the blend must not undo that.
  points.front() = std::min(points.front(), lo);
  points.back() = std::max(points.back(), hi);
  return points;
}

}  // namespace

void KanLinear::update_grid(const Tensor& x, const GridUpdateConfig& config) {
  config.validate();
  if (x.rank() != 2 || x.extent(1) != in_) throw DimensionError("update_grid: expected [B, in] input, got " + shape_string(x.shape()));
  const std::size_t batch = x.extent(0);
  const auto g = static_cast<std::size_t>(options_.grid_size);
  if (batch < g + 1) {
    throw DomainError("update_grid: " + std::to_string(batch) + " samples cannot place " + std::to_string(g + 1) +
                      " grid points");
  }
  const std::size_t nb = basis_count();
  const int k = options_.spline_order;

  // One grid per sharing group, placed from the pooled values of its features.
  std::vector<SplineGrid> new_grids(in_);
  for (std::size_t owner = 0; owner < in_;) {
    std::size_t end = owner + 1;
    while (end < in_ && grid_owner(end) == owner) ++end;
    std::vector<double> pooled;
    pooled.reserve(batch * (end - owner));
    for (std::size_t j = owner; j < end; ++j)
      for (std::size_t b = 0; b < batch; ++b) pooled.push_back(x.at(b, j));
    const SplineGrid shared = extend_grid(
        blended_grid_points(std::move(pooled), options_.grid_size, config, "update_grid feature " + std::to_string(owner)), k);
    shared.validate();
    std::fill(new_grids.begin() + static_cast<std::ptrdiff_t>(owner), new_grids.begin() + static_cast<std::ptrdiff_t>(end), shared);
    owner = end;
  }

  // Re-fit every edge of feature j to its previous spline values on the batch.
  Tensor& c = spline_weight_.value;
  parallel_for(in_, [&](std::size_t j) {
    std::vector<double> column(batch);
    for (std::size_t b = 0; b < batch; ++b) column[b] = x.at(b, j);
    const Tensor old_basis = basis_matrix_local(column, grid(j));
    Tensor targets({batch, out_});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t o = 0; o < out_; ++o) {
        double v = 0.0;
        for (std::size_t i = 0; i < nb; ++i) v += old_basis.at(b, i) * c[(o * in_ + j) * nb + i];
        targets.at(b, o) = v;
      }
    const SplineFit fit = fit_coefficients(column, targets, new_grids[j], config.refit_ridge);
    for (std::size_t o = 0; o < out_; ++o)
      for (std::size_t i = 0; i < nb; ++i) c[(o * in_ + j) * nb + i] = fit.coefficients.at(i, o);
  });
  for (std::size_t j = 0; j < in_; ++j) set_grid(j, new_grids[j]);
}

}  // namespace kanet
