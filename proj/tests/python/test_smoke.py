import math

import numpy as np
import pytest

import kanet


def test_partition_of_unity():
    knots = kanet.uniform_grid(5, 3, -1.0, 1.0)
    assert len(knots) == 5 + 2 * 3 + 1
    x = np.linspace(-1.0, 1.0, 101)
    b = kanet.basis_matrix(x, knots, 5, 3)
    assert b.shape == (101, 8)
    assert np.all(b >= 0.0)
    assert np.max(np.abs(b.sum(axis=1) - 1.0)) < 1e-12


def test_kan_linear_forward_backward_and_grid_update():
    layer = kanet.KanLinear(3, 2, grid_size=5, spline_order=3, seed=1)
    assert layer.parameter_count == 2 * 3 * (5 + 3 + 2)
    x = np.random.default_rng(0).uniform(-1, 1, size=(40, 3))
    y = layer.forward(x)
    assert y.shape == (40, 2)
    dx = layer.backward(np.ones_like(y))
    assert dx.shape == x.shape
    layer.update_grid(x, epsilon=0.0)
    knots = layer.knots
    assert knots.shape == (3, 12)
    assert np.all(np.diff(knots, axis=1) >= 0.0)
    with pytest.raises(kanet.DimensionError):
        layer.forward(np.zeros((2, 4)))


def test_model_and_growth():
    assert [kanet.growth_rate(m, 8) for m in (1, 2, 3)] == [8, 16, 32]
    cfg = kanet.NetworkConfig()
    cfg.stages = [1, 1]
    cfg.k0 = 2
    cfg.patch = [7, 7, 8]
    cfg.classes = 3
    cfg.bottleneck_factor = 1
    net = kanet.Model(cfg, 0)
    logits = net.forward(np.zeros((2, 1, 7, 7, 8)))
    assert logits.shape == (2, 3)
    assert net.parameter_count > 0


def test_metrics_and_loss():
    m = kanet.metrics_from_confusion([40, 10, 10, 40], 2)
    assert m["overall_accuracy"] == pytest.approx(0.8, abs=1e-15)
    assert m["kappa"] == pytest.approx(0.6, abs=1e-15)
    loss, grad = kanet.cross_entropy(np.zeros((1, 2)), [1])
    assert loss == pytest.approx(math.log(2.0))
    assert grad.shape == (1, 2)


def test_cube_round_trip(tmp_path):
    cube = kanet.synth_cube(classes=3, height=10, width=9, bands=4, seed=2)
    assert cube["reflectance"].shape == (10, 9, 4)
    path = tmp_path / "c.hsc"
    kanet.write_cube(path, cube["reflectance"], cube["labels"], cube["classes"])
    back = kanet.read_cube(path)
    assert np.array_equal(back["reflectance"], cube["reflectance"])
    assert np.array_equal(back["labels"], cube["labels"])
    path.write_bytes(path.read_bytes()[:30])
    with pytest.raises(kanet.FormatError):
        kanet.read_cube(path)


def test_experiments():
    (name, err, passed), = kanet.gradcheck("linear")
    assert name == "linear" and passed and err < 1e-4
    demo = kanet.grid_demo(epsilon=0.0)
    assert demo["widest_between_modes"]
    assert sorted(demo["after"]) == demo["after"]
