#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "kanet/bspline.hpp"
#include "kanet/conv3d.hpp"
#include "kanet/errors.hpp"
#include "kanet/experiments.hpp"
#include "kanet/hsi.hpp"
#include "kanet/kan_linear.hpp"
#include "kanet/model.hpp"
#include "kanet/train.hpp"

namespace py = pybind11;
using namespace kanet;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Tensor& t) {
  py::array_t<double> a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

Tensor from_numpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

std::vector<double> flat(const Array& a) { return {a.data(), a.data() + a.size()}; }

py::dict cube_to_dict(const LabeledCube& c) {
  py::array_t<float> refl({c.height, c.width, c.bands});
  std::copy(c.reflectance.begin(), c.reflectance.end(), refl.mutable_data());
  py::array_t<std::uint16_t> labels({c.height, c.width});
  std::copy(c.labels.begin(), c.labels.end(), labels.mutable_data());
  py::dict d;
  d["reflectance"] = refl;
  d["labels"] = labels;
  d["classes"] = c.classes;
  return d;
}

LabeledCube cube_from(const py::array_t<float, py::array::c_style | py::array::forcecast>& refl,
                      const py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>& labels,
                      std::size_t classes) {
  if (refl.ndim() != 3 || labels.ndim() != 2 || labels.shape(0) != refl.shape(0) || labels.shape(1) != refl.shape(1)) {
    throw DimensionError("cube: reflectance must be H x W x L and labels H x W");
  }
  LabeledCube c(static_cast<std::size_t>(refl.shape(0)), static_cast<std::size_t>(refl.shape(1)),
                static_cast<std::size_t>(refl.shape(2)), classes);
  std::copy(refl.data(), refl.data() + refl.size(), c.reflectance.begin());
  std::copy(labels.data(), labels.data() + labels.size(), c.labels.begin());
  return c;
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["overall_accuracy"] = m.overall_accuracy;
  d["average_accuracy"] = m.average_accuracy;
  d["kappa"] = m.kappa;
  d["class_accuracy"] = m.class_accuracy;
  d["confusion"] = m.confusion;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "KAN layers, 3-D KAN convolution and the KAN-DenseNet classifier";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<GeometryError>(m, "GeometryError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("uniform_grid", [](int g, int k, double lo, double hi) { return uniform_grid(g, k, lo, hi).knots; },
        py::arg("grid_size"), py::arg("order"), py::arg("lo") = -1.0, py::arg("hi") = 1.0,
        "Extended uniform knot vector.");
  m.def(
      "basis_matrix",
      [](const Array& x, const Array& knots, int grid_size, int order) {
        SplineGrid g{order, grid_size, flat(knots)};
        g.validate();
        const auto xs = flat(x);
        return to_numpy(basis_matrix(xs, g));
      },
      py::arg("x"), py::arg("knots"), py::arg("grid_size"), py::arg("order"), "n x (G + k) B-spline values.");

  py::enum_<Mode>(m, "Mode").value("train", Mode::train).value("eval", Mode::eval).value("calibrate", Mode::calibrate);

  py::class_<KanLinear>(m, "KanLinear")
      .def(py::init([](std::size_t in, std::size_t out, int grid_size, int order, std::uint64_t seed) {
             KanLinearOptions o;
             o.grid_size = grid_size;
             o.spline_order = order;
             return KanLinear(in, out, o, seed);
           }),
           py::arg("in_features"), py::arg("out_features"), py::arg("grid_size") = 5, py::arg("spline_order") = 3,
           py::arg("seed") = 0)
      .def("forward", [](KanLinear& l, const Array& x) { return to_numpy(l.forward(from_numpy(x))); })
      .def("backward", [](KanLinear& l, const Array& dy) { return to_numpy(l.backward(from_numpy(dy))); })
      .def(
          "update_grid",
          [](KanLinear& l, const Array& x, double epsilon, double margin) {
            GridUpdateConfig c;
            c.epsilon = epsilon;
            c.margin = margin;
            l.update_grid(from_numpy(x), c);
          },
          py::arg("x"), py::arg("epsilon") = 0.02, py::arg("margin") = 0.01)
      .def_property_readonly("knots", [](const KanLinear& l) { return to_numpy(l.knots()); })
      .def_property_readonly("parameter_count", &KanLinear::parameter_count);

  py::class_<NetworkConfig>(m, "NetworkConfig")
      .def(py::init<>())
      .def_readwrite("stages", &NetworkConfig::stages)
      .def_readwrite("k0", &NetworkConfig::k0)
      .def_readwrite("grid_size", &NetworkConfig::grid_size)
      .def_readwrite("spline_order", &NetworkConfig::spline_order)
      .def_readwrite("patch", &NetworkConfig::patch)
      .def_readwrite("classes", &NetworkConfig::classes)
      .def_readwrite("bottleneck_factor", &NetworkConfig::bottleneck_factor)
      .def_readwrite("compression", &NetworkConfig::compression);

  m.def("growth_rate", &growth_rate, py::arg("stage"), py::arg("k0"));

  py::class_<Model>(m, "Model")
      .def(py::init<const NetworkConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def(
          "forward", [](Model& net, const Array& x, Mode mode) { return to_numpy(net.forward(from_numpy(x), mode)); },
          py::arg("x"), py::arg("mode") = Mode::eval)
      .def("backward", [](Model& net, const Array& dy) { return to_numpy(net.backward(from_numpy(dy))); })
      .def_property_readonly("parameter_count", &Model::parameter_count);

  m.def(
      "synth_cube",
      [](std::size_t classes, std::size_t height, std::size_t width, std::size_t bands, double noise, std::uint64_t seed) {
        SynthOptions o;
        o.classes = classes;
        o.height = height;
        o.width = width;
        o.bands = bands;
        o.noise = noise;
        o.seed = seed;
        return cube_to_dict(synth_cube(o));
      },
      py::arg("classes") = 5, py::arg("height") = 32, py::arg("width") = 32, py::arg("bands") = 16,
      py::arg("noise") = 0.05, py::arg("seed") = 0, "Synthetic cube as a dict of numpy arrays.");
  m.def("write_cube",
        [](const std::filesystem::path& path, const py::array_t<float, py::array::c_style | py::array::forcecast>& refl,
           const py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>& labels,
           std::size_t classes) { write_cube(path, cube_from(refl, labels, classes)); },
        py::arg("path"), py::arg("reflectance"), py::arg("labels"), py::arg("classes"));
  m.def("read_cube", [](const std::filesystem::path& path) { return cube_to_dict(read_cube(path)); });

  m.def(
      "compute_metrics",
      [](const std::vector<int>& truth, const std::vector<int>& pred, std::size_t classes) {
        return metrics_dict(compute_metrics(truth, pred, classes));
      },
      py::arg("truth"), py::arg("pred"), py::arg("classes"));
  m.def(
      "metrics_from_confusion",
      [](const std::vector<std::size_t>& confusion, std::size_t classes) {
        return metrics_dict(metrics_from_confusion(confusion, classes));
      },
      py::arg("confusion"), py::arg("classes"));

  m.def(
      "cross_entropy",
      [](const Array& logits, const std::vector<int>& targets) {
        const LossResult r = cross_entropy(from_numpy(logits), targets);
        return py::make_tuple(r.loss, to_numpy(r.grad));
      },
      py::arg("logits"), py::arg("targets"));

  m.def("gradcheck", [](const std::string& layer) {
    py::list out;
    for (const GradCheckEntry& e : gradcheck_suite(layer)) {
      out.append(py::make_tuple(e.layer, e.max_relative_error, e.passed));
    }
    return out;
  }, py::arg("layer") = "");
  m.def(
      "grid_demo",
      [](double epsilon, std::uint64_t seed) {
        GridDemoConfig c;
        c.epsilon = epsilon;
        c.seed = seed;
        const GridDemoResult r = grid_demo(c);
        py::dict d;
        d["before"] = r.before;
        d["after"] = r.after;
        d["uniform"] = r.uniform;
        d["counts_after"] = r.counts_after;
        d["widest_between_modes"] = r.widest_between_modes;
        return d;
      },
      py::arg("epsilon") = 0.0, py::arg("seed") = 0);
}
