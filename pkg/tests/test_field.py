import numpy as np
import pytest

from hivesdf.field import (DEFAULT_THETA, FieldError, color_eval, evaluate_sdf, make_field, make_mlp,
                           normal_second_grad, s_value, sdf_eval, sdf_spatial_grad)
from hivesdf.grid import default_hierarchy
from hivesdf.sparse import NodeSet, build_sparse
from hivesdf.tape import Tape

from conftest import constant_sdf, linear_sdf, probe_field, sphere_sdf


def small_field(rng, **kw):
    return make_field(default_hierarchy(8, 3, 2, 0.02, rng), rng, hidden=16, feature_dim=4,
                      color_hidden=8, **kw)


def test_zero_weights_give_output_bias(rng):
    fld = small_field(rng)
    for w, b in fld.sdf_net.layers:
        w.values[:] = 0.0
        b.values[:] = 0.0
    fld.sdf_net.layers[-1][1].values[0] = 0.37
    sdf, feat = sdf_eval(fld, Tape().const(rng.uniform(-1, 1, (30, 3))))
    assert np.array_equal(sdf.value, np.full(30, 0.37))
    assert feat.shape == (30, 4)


def test_sdf_eval_deterministic(rng):
    fld = small_field(rng)
    x = rng.uniform(-1, 1, (40, 3))
    a = sdf_eval(fld, Tape().const(x))[0].value
    b = sdf_eval(fld, Tape().const(x))[0].value
    assert np.array_equal(a, b)


def wide_field(rng, **kw):
    # the sphere-like start only holds approximately, improving with width
    return make_field(default_hierarchy(8, 3, 2, 0.02, rng), rng, hidden=256, feature_dim=4,
                      color_hidden=8, **kw)


def test_geometric_init_is_sphere_like(rng):
    fld = wide_field(rng)
    assert evaluate_sdf(fld, np.zeros((1, 3)))[0] < 0
    d = rng.normal(size=(100, 3))
    boundary = d / np.abs(d).max(axis=1, keepdims=True)       # points on the cube surface
    assert np.all(evaluate_sdf(fld, boundary) > 0)


def test_geometric_init_approximates_radius(rng):
    fld = wide_field(rng, init_radius=0.5)
    d = rng.normal(size=(200, 3))
    x = 0.5 * d / np.linalg.norm(d, axis=1, keepdims=True)
    assert np.abs(evaluate_sdf(fld, x)).max() < 0.15


def test_linear_field_gradient_exact():
    u = np.array([0.6, 0.0, 0.8])
    fld = probe_field(linear_sdf(u))
    x = np.random.default_rng(0).uniform(-0.9, 0.9, (25, 3))
    g = sdf_spatial_grad(fld, Tape().const(x), 1e-3).value
    assert np.abs(g - u).max() <= 1e-12


def test_sphere_field_gradient():
    fld = probe_field(sphere_sdf(0.5))
    g = sdf_spatial_grad(fld, Tape().const([[0.5, 0.0, 0.0]]), 1e-3).value[0]
    assert np.abs(g - [1.0, 0.0, 0.0]).max() < 1e-5


def test_constant_field_gradient_zero():
    g = sdf_spatial_grad(probe_field(constant_sdf()), Tape().const([[0.1, 0.2, 0.3]]), 1e-3).value
    assert np.array_equal(g, np.zeros((1, 3)))


def test_normal_second_grad_linear_is_zero():
    fld = probe_field(linear_sdf([0.0, 1.0, 0.0]))
    ng = normal_second_grad(fld, Tape().const([[0.1, 0.2, 0.3]]), [1.0, 0.0, 0.0]).value
    assert np.abs(ng).max() < 1e-9


def test_normal_second_grad_sphere_curvature():
    fld = probe_field(sphere_sdf(0.5))
    ng = normal_second_grad(fld, Tape().const([[0.5, 0.0, 0.0]]), [0.0, 1.0, 0.0]).value[0]
    assert np.linalg.norm(ng) == pytest.approx(2.0, rel=0.05)
    # derivative of the normal along a tangent points along that tangent
    assert ng[1] > 0 and abs(ng[0]) < 1e-3


def test_normal_second_grad_constant_is_zeroed():
    ng = normal_second_grad(probe_field(constant_sdf()), Tape().const([[0.1, 0.0, 0.0]]), [1, 0, 0]).value
    assert np.array_equal(ng, np.zeros((1, 3)))


def test_normal_second_grad_bad_step():
    with pytest.raises(ValueError):
        normal_second_grad(probe_field(constant_sdf()), Tape().const([[0.0, 0.0, 0.0]]), [1, 0, 0], h=0.0)


def test_color_zero_network_is_half_grey(rng):
    fld = small_field(rng)
    for w, b in fld.color_net.layers:
        w.values[:] = 0.0
        b.values[:] = 0.0
    t = Tape()
    x = t.const(rng.uniform(-1, 1, (5, 3)))
    v = t.const(np.tile([0.0, 0.0, 1.0], (5, 1)))
    feat = t.const(np.zeros((5, 4)))
    assert np.array_equal(color_eval(fld, x, v, None, feat).value, np.full((5, 3), 0.5))


def test_color_in_open_unit_interval(rng):
    fld = small_field(rng)
    t = Tape()
    x = t.const(rng.uniform(-1, 1, (50, 3)) * 5)
    v = t.const(rng.normal(size=(50, 3)))
    rgb = color_eval(fld, x, v, None, t.const(rng.normal(size=(50, 4)) * 3)).value
    assert np.all((rgb > 0) & (rgb < 1))


def test_color_requires_normals_when_configured(rng):
    fld = small_field(rng, color_normal=True)
    t = Tape()
    x = t.const(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        color_eval(fld, x, x, None, t.const(np.zeros((2, 4))))


def test_s_value():
    fld = probe_field(constant_sdf())
    fld.theta.values[0] = 0.0
    assert s_value(fld, Tape()).value[0] == 1.0
    fld.theta.values[0] = DEFAULT_THETA
    assert s_value(fld, Tape()).value[0] == pytest.approx(16.0, rel=1e-15)


def test_adding_sparse_level_keeps_field(rng):
    fld = small_field(rng)
    x = rng.uniform(-1, 1, (64, 3))
    before = evaluate_sdf(fld, x)
    level = build_sparse(NodeSet(rng.integers(0, 16, (200, 3)), 16), 16, 2, 0.5, rng)
    fld.add_sparse_level(level)
    assert fld.input_width == 3 + 6 + 2
    assert np.array_equal(evaluate_sdf(fld, x), before)


def test_parameters_cover_every_table(rng):
    fld = small_field(rng)
    names = {p.name for p in fld.parameters()}
    assert "theta" in names and any(n.startswith("volume") for n in names)
    assert len(fld.parameters()) == 3 + 6 + 6 + 1


def test_non_finite_activation_raises(rng):
    mlp = make_mlp([3, 4, 1], rng)
    mlp.layers[0][0].values[0] = np.inf
    with pytest.raises(FieldError):
        mlp(Tape().const(np.ones((2, 3))))


def test_evaluate_sdf_chunking_consistent(rng):
    fld = small_field(rng)
    x = rng.uniform(-1, 1, (1000, 3))
    assert np.array_equal(evaluate_sdf(fld, x, chunk=7), evaluate_sdf(fld, x, chunk=4096))
