#include <cmath>
#include <cstdlib>

#include "doctest.h"
#include "kanet/conv3d.hpp"
#include "kanet/grad_check.hpp"
#include "test_support.hpp"

using namespace kanet;
using kanet::testing::random_normal;
using kanet::testing::random_tensor;

namespace {

std::size_t voxel(const Shape& s, std::size_t b, std::size_t c, std::size_t d, std::size_t h, std::size_t w) {
  return (((b * s[1] + c) * s[2] + d) * s[3] + h) * s[4] + w;
}

// Number of (output position, kernel tap) pairs reading each input voxel.
Tensor tap_multiplicity(const Shape& s, const ConvGeometry& g) {
  const Extent3 out = g.output_extents({s[2], s[3], s[4]});
  Tensor m(s);
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t c = 0; c < s[1]; ++c)
      for (std::size_t od = 0; od < out[0]; ++od)
        for (std::size_t oh = 0; oh < out[1]; ++oh)
          for (std::size_t ow = 0; ow < out[2]; ++ow)
            for (std::size_t kd = 0; kd < g.kernel[0]; ++kd)
              for (std::size_t kh = 0; kh < g.kernel[1]; ++kh)
                for (std::size_t kw = 0; kw < g.kernel[2]; ++kw) {
                  const auto d = static_cast<long>(od * g.stride[0] + kd * g.dilation[0]) - static_cast<long>(g.padding[0]);
                  const auto h = static_cast<long>(oh * g.stride[1] + kh * g.dilation[1]) - static_cast<long>(g.padding[1]);
                  const auto w = static_cast<long>(ow * g.stride[2] + kw * g.dilation[2]) - static_cast<long>(g.padding[2]);
                  if (d < 0 || h < 0 || w < 0 || d >= static_cast<long>(s[2]) || h >= static_cast<long>(s[3]) ||
                      w >= static_cast<long>(s[4]))
                    continue;
                  m[voxel(s, b, c, static_cast<std::size_t>(d), static_cast<std::size_t>(h), static_cast<std::size_t>(w))] += 1.0;
                }
  return m;
}

KanLinearOptions identity_options() {
  KanLinearOptions o;
  o.base_activation = BaseActivation::identity;
  return o;
}

}  // namespace

TEST_CASE("output extents") {
  CHECK(ConvGeometry::cube(3).output_extents({5, 5, 5}) == Extent3{3, 3, 3});
  CHECK(ConvGeometry::cube(3, 2, 1).output_extents({5, 5, 5}) == Extent3{3, 3, 3});
  CHECK(ConvGeometry::cube(3, 1, 0, 2).output_extents({7, 6, 5}) == Extent3{3, 2, 1});
  CHECK_THROWS_AS(ConvGeometry::cube(3).output_extents({2, 5, 5}), GeometryError);
}

TEST_CASE("unfold shapes") {
  const Tensor x = random_tensor({1, 2, 5, 5, 5}, 0);
  CHECK(unfold3d(x, ConvGeometry::cube(3)).shape() == Shape{1, 27, 54});
  CHECK(unfold3d(x, ConvGeometry::cube(3, 2, 1)).shape() == Shape{1, 27, 54});
  CHECK_THROWS_AS(unfold3d(Tensor({1, 1, 2, 2, 2}), ConvGeometry::cube(3)), GeometryError);
}

TEST_CASE("corner rows of a padded unfold count in-bounds taps") {
  const std::size_t channels = 3;
  const Tensor cols = unfold3d(Tensor({1, channels, 4, 4, 4}, 1.0), ConvGeometry::cube(3, 1, 1));
  const std::size_t width = channels * 27;
  for (std::size_t row : {std::size_t{0}, std::size_t{3}, std::size_t{63}}) {
    std::size_t ones = 0, zeros = 0;
    for (std::size_t i = 0; i < width; ++i) (cols[row * width + i] == 1.0 ? ones : zeros)++;
    CHECK(ones == 8 * channels);
    CHECK(zeros == 19 * channels);
  }
}

TEST_CASE("unfold columns are channel-major then kernel row-major") {
  Tensor x({1, 2, 3, 3, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  const Tensor cols = unfold3d(x, ConvGeometry::cube(3));
  CHECK(cols.shape() == Shape{1, 1, 54});
  for (std::size_t i = 0; i < 54; ++i) CHECK(cols[i] == static_cast<double>(i));
}

TEST_CASE("fold of unfold scales by tap multiplicity") {
  const ConvGeometry geometries[] = {ConvGeometry::cube(3), ConvGeometry::cube(3, 2, 1), ConvGeometry::cube(2, 1, 0, 2),
                                     ConvGeometry::cube(3, 1, 2)};
  for (const auto& g : geometries) {
    const Shape s{2, 2, 5, 4, 6};
    const Tensor x = random_tensor(s, 3);
    const Tensor back = fold3d(unfold3d(x, g), s, g);
    const Tensor mult = tap_multiplicity(s, g);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(back[i] == doctest::Approx(x[i] * mult[i]).epsilon(1e-12));
  }
}

TEST_CASE("unfold path matches the naive loops on 20 geometries") {
  Rng pick(123);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ConvGeometry g;
    for (int a = 0; a < 3; ++a) {
      g.kernel[a] = 1 + pick.index(3);
      g.stride[a] = 1 + pick.index(2);
      g.padding[a] = pick.index(3);
      g.dilation[a] = 1 + pick.index(2);
    }
    const std::size_t cin = 1 + pick.index(3), cout = 1 + pick.index(3);
    const Tensor x = random_normal({2, cin, 5 + pick.index(3), 5, 4 + pick.index(3)}, seed);
    const Tensor w = random_normal({cout, cin, g.kernel[0], g.kernel[1], g.kernel[2]}, seed + 100);
    const Tensor b = random_normal({cout}, seed + 200);
    const Tensor fast = linear_conv3d(x, w, b, g);
    const Tensor slow = linear_conv3d_naive(x, w, b, g);
    CHECK(fast.shape() == slow.shape());
    CHECK(max_abs_difference(fast, slow) < 1e-6);
  }
}

TEST_CASE("delta kernel with same padding is the identity") {
  const Tensor x = random_tensor({2, 3, 4, 5, 6}, 7);
  for (std::size_t k : {1, 3, 5}) {
    Tensor w({3, 3, k, k, k});
    const std::size_t c0 = k / 2;
    for (std::size_t c = 0; c < 3; ++c) w[(((c * 3 + c) * k + c0) * k + c0) * k + c0] = 1.0;
    CHECK(linear_conv3d(x, w, Tensor({3}), ConvGeometry::cube(k, 1, k / 2)) == x);
  }
}

TEST_CASE("linear conv gradients") {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    Conv3d conv(2, 3, seed == 0 ? ConvGeometry::cube(3, 1, 1) : ConvGeometry::cube(2, 2, 1, 1), seed);
    Tensor x = random_normal({2, 2, 4, 4, 3}, seed);
    auto target = layer_target(conv, x);
    CHECK(grad_check(target, {1e-5, seed}).max_relative_error < 1e-4);
  }
}

TEST_CASE("kan conv gradients") {
  KanConv3d conv(2, 2, ConvGeometry::cube(3, 1, 1), {}, 5);
  Tensor x = random_normal({1, 2, 4, 4, 4}, 6, 0.6);
  auto target = layer_target(conv, x);
  const auto r = grad_check(target, {1e-5, 1});
  INFO(r.worst_coordinate);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("pooling gradients") {
  AvgPool3d pool({2, 2, 2}, {2, 2, 2});
  Tensor x = random_normal({2, 2, 4, 5, 4}, 3);
  auto target = layer_target(pool, x);
  CHECK(grad_check(target).max_relative_error < 1e-5);

  AvgPool3d overlapping({3, 2, 2}, {1, 2, 1});
  auto overlap_target = layer_target(overlapping, x);
  CHECK(grad_check(overlap_target).max_relative_error < 1e-5);

  GlobalAvgPool gap;
  auto gap_target = layer_target(gap, x);
  CHECK(grad_check(gap_target).max_relative_error < 1e-6);
}

TEST_CASE("kan conv with identity base and zero scaler is a linear conv") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t cin = 1 + seed % 3, cout = 1 + seed % 2;
    const ConvGeometry g = ConvGeometry::cube(1 + 2 * (seed % 2), 1 + seed % 2, seed % 2);
    KanConv3d conv(cin, cout, g, identity_options(), seed);
    conv.inner().spline_scaler().value.fill(0.0);
    const Tensor x = random_normal({2, cin, 5, 4, 5}, seed + 30, 2.0);
    const Tensor& wb = conv.inner().base_weight().value;
    const Tensor w = Tensor(wb).reshaped({cout, cin, g.kernel[0], g.kernel[1], g.kernel[2]});
    CHECK(max_abs_difference(conv.forward(x), linear_conv3d(x, w, Tensor({cout}), g)) < 1e-6);
  }
}

TEST_CASE("kan conv output shape and parameter count") {
  KanConv3d conv(4, 8, ConvGeometry::cube(3, 1, 1), {}, 0);
  CHECK(conv.forward(random_normal({2, 4, 9, 9, 9}, 1)).shape() == Shape{2, 8, 9, 9, 9});
  CHECK(conv.parameter_count() == 8 * 4 * 27 * (5 + 3 + 2));
  std::size_t total = 0;
  for (Parameter* p : conv.parameters()) total += p->value.size();
  CHECK(total == conv.parameter_count());
  CHECK_THROWS_AS(conv.forward(Tensor({1, 3, 5, 5, 5})), DimensionError);
}

TEST_CASE("kan conv is local") {
  KanConv3d conv(2, 3, ConvGeometry::cube(3, 1, 1), {}, 2);
  Tensor x = random_normal({1, 2, 6, 6, 6}, 3, 0.5);
  const Tensor y0 = conv.forward(x);
  x[voxel(x.shape(), 0, 1, 2, 3, 4)] += 0.3;
  const Tensor y1 = conv.forward(x);
  std::size_t changed = 0;
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t d = 0; d < 6; ++d)
      for (std::size_t h = 0; h < 6; ++h)
        for (std::size_t w = 0; w < 6; ++w) {
          const std::size_t i = voxel(y0.shape(), 0, o, d, h, w);
          const bool reach = std::labs(static_cast<long>(d) - 2) <= 1 && std::labs(static_cast<long>(h) - 3) <= 1 &&
                             std::labs(static_cast<long>(w) - 4) <= 1;
          if (!reach) CHECK(y0[i] == y1[i]);
          if (y0[i] != y1[i]) ++changed;
        }
  CHECK(changed > 0);
}

TEST_CASE("kan conv grid update keeps knots monotone and is seeded") {
  KanConv3d a(2, 2, ConvGeometry::cube(3, 1, 1), {}, 4), b(2, 2, ConvGeometry::cube(3, 1, 1), {}, 4);
  const Tensor x = random_normal({2, 2, 5, 5, 5}, 8);
  a.update_grid(x, {}, 100, 9);
  b.update_grid(x, {}, 100, 9);
  CHECK(a.inner().knots() == b.inner().knots());
  for (std::size_t j = 0; j < a.inner().in_features(); ++j) {
    const SplineGrid g = a.inner().grid(j);
    CHECK(std::is_sorted(g.knots.begin(), g.knots.end()));
  }
}

TEST_CASE("average pooling values") {
  const Tensor c = avg_pool3d(Tensor({1, 2, 4, 4, 4}, 3.25), {2, 2, 2}, {2, 2, 2});
  CHECK(c.shape() == Shape{1, 2, 2, 2, 2});
  for (double v : c.data()) CHECK(v == 3.25);

  Tensor alt({1, 1, 4, 4, 4});
  for (std::size_t i = 0; i < alt.size(); ++i) alt[i] = 1.0 + static_cast<double>(i % 2);
  const Tensor m = avg_pool3d(alt, {2, 2, 2}, {2, 2, 2});
  for (double v : m.data()) CHECK(v == 1.5);

  CHECK_THROWS_AS(avg_pool3d(Tensor({1, 1, 1, 4, 4}), {2, 2, 2}, {2, 2, 2}), GeometryError);
}

TEST_CASE("global average pooling") {
  const Tensor g = global_avg_pool(Tensor({2, 3, 2, 2, 2}, -4.0));
  CHECK(g == Tensor({2, 3}, -4.0));
  const Tensor x = random_tensor({2, 3, 3, 2, 2}, 1), y = random_tensor({2, 3, 3, 2, 2}, 2);
  const Tensor lhs = global_avg_pool(x * 2.0 + y * -0.5);
  const Tensor rhs = global_avg_pool(x) * 2.0 + global_avg_pool(y) * -0.5;
  CHECK(max_abs_difference(lhs, rhs) < 1e-12);
}

TEST_CASE("per-channel grids: shared-evaluation path matches the generic path") {
  KanLinearOptions shared;
  shared.grid_sharing = GridSharing::per_group;
  const ConvGeometry geometries[] = {ConvGeometry::cube(3, 1, 1), ConvGeometry::cube(3, 2, 2, 2), ConvGeometry::cube(2)};
  for (const auto& g : geometries) {
    KanConv3d fast(2, 3, g, shared, 7), generic(2, 3, g, {}, 7);
    CHECK(fast.inner().options().grid_group == g.kernel_volume());
    Tensor x = random_normal({2, 2, 5, 6, 4}, 8, 0.8);
    const Tensor yf = fast.forward(x), yg = generic.forward(x);
    CHECK(max_abs_difference(yf, yg) < 1e-12);
    const Tensor dy = random_normal(yf.shape(), 9);
    const Tensor dxf = fast.backward(dy), dxg = generic.backward(dy);
    CHECK(max_abs_difference(dxf, dxg) < 1e-12);
    for (std::size_t p = 0; p < 3; ++p)
      CHECK(max_abs_difference(fast.parameters()[p]->grad, generic.parameters()[p]->grad) < 1e-12);
  }
}

TEST_CASE("per-channel grids: gradients and tied updates") {
  KanLinearOptions shared;
  shared.grid_sharing = GridSharing::per_group;
  KanConv3d conv(2, 2, ConvGeometry::cube(3, 1, 1), shared, 5);
  Tensor x = random_normal({1, 2, 4, 4, 4}, 6, 0.6);
  conv.update_grid(x, {}, 4096, 1);
  for (std::size_t j = 0; j < conv.inner().in_features(); ++j) CHECK(conv.inner().grid(j) == conv.inner().grid(j / 27 * 27));
  CHECK_FALSE(conv.inner().grid(0) == conv.inner().grid(27));
  auto target = layer_target(conv, x);
  const auto r = grad_check(target, {1e-5, 2});
  INFO(r.worst_coordinate);
  CHECK(r.max_relative_error < 1e-4);

  KanLinearOptions identity = shared;
  identity.base_activation = BaseActivation::identity;
  KanConv3d lin(2, 3, ConvGeometry::cube(3, 1, 1), identity, 3);
  lin.inner().spline_scaler().value.fill(0.0);
  const Tensor w = Tensor(lin.inner().base_weight().value).reshaped({3, 2, 3, 3, 3});
  CHECK(max_abs_difference(lin.forward(x), linear_conv3d(x, w, Tensor({3}), ConvGeometry::cube(3, 1, 1))) < 1e-6);
}
