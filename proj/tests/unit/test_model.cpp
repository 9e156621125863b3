#include <cmath>

#include "doctest.h"
#include "kanet/grad_check.hpp"
#include "kanet/model.hpp"
#include "test_support.hpp"

using namespace kanet;
using kanet::testing::random_normal;

namespace {

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.stages = {1, 1};
  c.k0 = 2;
  c.patch = {7, 7, 8};
  c.classes = 3;
  c.bottleneck_factor = 1;
  return c;
}

// Trainable scalar count predicted from the architecture description alone.
std::size_t closed_form_count(const NetworkConfig& c) {
  const std::size_t per_edge = static_cast<std::size_t>(c.grid_size + c.spline_order) + 2;
  const std::size_t stem = 2 * c.k0;
  std::size_t total = stem * 27 + stem;
  std::size_t block_in = stem;
  std::size_t carried = stem;
  for (std::size_t s = 0; s < c.stages.size(); ++s) {
    const std::size_t g = (std::size_t{1} << s) * c.k0;
    std::size_t ch = block_in;
    for (std::size_t l = 0; l < c.stages[s]; ++l) {
      total += 2 * ch;  // batch norm
      std::size_t kan_in = ch;
      if (c.bottleneck_factor > 0) {
        kan_in = c.bottleneck_factor * g;
        total += ch * kan_in + kan_in;
      }
      total += g * kan_in * 27 * per_edge;
      ch += g;
    }
    carried += c.stages[s] * g;
    if (s + 1 < c.stages.size()) {
      const auto out = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(c.compression * static_cast<double>(ch))));
      total += 2 * ch + ch * out + out;
      block_in = out + carried;
    } else {
      total += c.head == HeadKind::linear ? ch * c.classes + c.classes : ch * c.classes * per_edge;
    }
  }
  return total;
}

Tensor repeat_sample(const Tensor& one, std::size_t copies) {
  Tensor out({copies, one.extent(1), one.extent(2), one.extent(3), one.extent(4)});
  for (std::size_t b = 0; b < copies; ++b)
    std::copy(one.data().begin(), one.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * one.size()));
  return out;
}

}  // namespace

TEST_CASE("growth rate doubles per stage") {
  CHECK(growth_rate(1, 8) == 8);
  CHECK(growth_rate(2, 8) == 16);
  CHECK(growth_rate(3, 8) == 32);
  CHECK(growth_rate(2, 1) == 2);
  CHECK_THROWS_AS(growth_rate(0, 8), DomainError);
  NetworkConfig base;
  base.patch = {9, 9, 16};
  Model m(base, 0);
  std::vector<std::size_t> growth;
  for (const auto& b : m.blocks()) growth.push_back(b.growth);
  CHECK(growth == std::vector<std::size_t>{8, 16, 32});
}

TEST_CASE("parameter count matches the closed form") {
  std::vector<NetworkConfig> configs(5, tiny_config());
  configs[1].stages = {2, 3};
  configs[1].bottleneck_factor = 0;
  configs[2].stages = {1, 2, 1};
  configs[2].k0 = 3;
  configs[2].patch = {8, 8, 8};
  configs[2].compression = 0.7;
  configs[3].head = HeadKind::kan;
  configs[3].grid_size = 7;
  configs[3].spline_order = 2;
  configs[4].stages = {3};
  configs[4].bottleneck_factor = 2;
  for (const auto& c : configs) {
    Model m(c, 1);
    CHECK(count_parameters(m) == closed_form_count(c));
  }
}

TEST_CASE("larger configuration has more parameters") {
  NetworkConfig base, large;
  base.patch = large.patch = {9, 9, 16};
  large.stages = {14, 14, 14};
  Model a(base, 0), b(large, 0);
  CHECK(count_parameters(b) > count_parameters(a));
}

TEST_CASE("builds are deterministic per seed") {
  Model a(tiny_config(), 4), b(tiny_config(), 4), c(tiny_config(), 5);
  std::vector<Tensor> sa, sb, sc;
  a.visit_state([&](const std::string&, Tensor& t) { sa.push_back(t); });
  b.visit_state([&](const std::string&, Tensor& t) { sb.push_back(t); });
  c.visit_state([&](const std::string&, Tensor& t) { sc.push_back(t); });
  CHECK(sa == sb);
  CHECK_FALSE(sa == sc);
}

TEST_CASE("forward shape on an 11x11x16 patch") {
  NetworkConfig c = tiny_config();
  c.stages = {2, 2};
  c.k0 = 4;
  c.patch = {11, 11, 16};
  c.classes = 5;
  Model m(c, 0);
  CHECK(m.forward(random_normal({3, 1, 11, 11, 16}, 1), Mode::train).shape() == Shape{3, 5});
  CHECK_THROWS_AS(m.forward(random_normal({3, 1, 11, 11, 15}, 1), Mode::train), DimensionError);
}

TEST_CASE("resolution underflow names the axis") {
  NetworkConfig c = tiny_config();
  c.stages = {1, 1, 1, 1};
  c.patch = {9, 9, 4};
  try {
    Model m(c, 0);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("L (bands)") != std::string::npos);
  }
  c.stages = {};
  CHECK_THROWS_AS(Model(c, 0), ConfigError);
}

TEST_CASE("eval forward is pure and batch-consistent") {
  Model m(tiny_config(), 2);
  m.forward(random_normal({6, 1, 7, 7, 8}, 3), Mode::train);  // populate running statistics
  const Tensor one = random_normal({1, 1, 7, 7, 8}, 4);
  const Tensor y = m.forward(repeat_sample(one, 4), Mode::eval);
  for (std::size_t b = 1; b < 4; ++b)
    for (std::size_t k = 0; k < 3; ++k) CHECK(y.at(b, k) == y.at(0, k));

  const Tensor x = random_normal({4, 1, 7, 7, 8}, 5);
  const Tensor y1 = m.forward(x, Mode::eval);
  CHECK(m.forward(x, Mode::eval) == y1);

  // Reverse the batch order.
  Tensor flipped(x.shape());
  const std::size_t n = x.size() / 4;
  for (std::size_t b = 0; b < 4; ++b)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(b * n), n,
                flipped.data().begin() + static_cast<std::ptrdiff_t>((3 - b) * n));
  const Tensor yf = m.forward(flipped, Mode::eval);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t k = 0; k < 3; ++k) CHECK(yf.at(3 - b, k) == y1.at(b, k));
}

TEST_CASE("end-to-end gradients on a tiny network") {
  Model m(tiny_config(), 6);
  Tensor x = random_normal({2, 1, 7, 7, 8}, 7);
  auto target = layer_target(m, x);
  GradCheckOptions opt;
  opt.max_coordinates = 400;
  opt.seed = 3;
  const auto r = grad_check(target, opt);
  INFO(r.worst_coordinate);
  CHECK(r.max_relative_error < 1e-3);
}

TEST_CASE("end-to-end gradients with a KAN head and no bottleneck") {
  NetworkConfig c = tiny_config();
  c.head = HeadKind::kan;
  c.bottleneck_factor = 0;
  c.stages = {2, 1};
  Model m(c, 8);
  Tensor x = random_normal({2, 1, 7, 7, 8}, 9);
  auto target = layer_target(m, x);
  GradCheckOptions opt;
  opt.max_coordinates = 300;
  const auto r = grad_check(target, opt);
  INFO(r.worst_coordinate);
  CHECK(r.max_relative_error < 1e-3);
}

TEST_CASE("every parameter receives gradient") {
  NetworkConfig c = tiny_config();
  c.stages = {2, 2};
  Model m(c, 10);
  m.zero_grad();
  const Tensor y = m.forward(random_normal({4, 1, 7, 7, 8}, 11), Mode::train);
  m.backward(random_normal(y.shape(), 12));
  for (Parameter* p : m.parameters()) {
    bool any = false;
    for (double g : p->grad.data()) any = any || g != 0.0;
    INFO(p->name);
    CHECK(any);
  }
}

TEST_CASE("ablating a block changes every later block input") {
  NetworkConfig c = tiny_config();
  c.stages = {1, 1, 1};
  c.patch = {8, 8, 8};
  Model m(c, 13);
  const Tensor x = random_normal({2, 1, 8, 8, 8}, 14);
  std::vector<Tensor> clean, ablated;
  ForwardProbe probe;
  probe.block_inputs = &clean;
  m.forward(x, Mode::eval, &probe);
  probe.block_inputs = &ablated;
  probe.ablate_block = 0;
  m.forward(x, Mode::eval, &probe);
  CHECK(clean[0] == ablated[0]);
  for (std::size_t b = 1; b < 3; ++b) {
    CHECK(clean[b].shape() == ablated[b].shape());
    CHECK(max_abs_difference(clean[b], ablated[b]) > 0.0);
  }
  // Channel bookkeeping recorded at assembly agrees with the tensors.
  for (std::size_t b = 0; b < 3; ++b) CHECK(clean[b].extent(1) == m.blocks()[b].input_channels);
}

TEST_CASE("grid updates move knots and roughly preserve logits") {
  Model m(tiny_config(), 15);
  const Tensor x = random_normal({8, 1, 7, 7, 8}, 16);
  const Tensor before = m.forward(x, Mode::calibrate);
  std::vector<Tensor> knots_before;
  m.visit_state([&](const std::string& name, Tensor& t) {
    if (name.ends_with("knots")) knots_before.push_back(t);
  });
  m.update_grids(x, tiny_config().grid_update(), 2048, 1);
  std::size_t i = 0, moved = 0;
  m.visit_state([&](const std::string& name, Tensor& t) {
    if (name.ends_with("knots")) moved += (t == knots_before[i++]) ? 0 : 1;
  });
  CHECK(moved == knots_before.size());
  const Tensor after = m.forward(x, Mode::calibrate);
  CHECK(max_abs_difference(before, after) < 0.1 * (1.0 + std::sqrt(kanet::testing::rms(before.values()))));
}
