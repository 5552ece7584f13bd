import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hivesdf import tape as T
from hivesdf.tape import Parameter, Tape

from conftest import central_difference, tape_grad

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def test_forward_examples():
    t = Tape()
    assert T.mul(t.const(2.0), t.const(3.0)).value == 6.0
    assert T.add(t.const(1.0), t.const(0.0)).value == 1.0
    assert T.dot(t.const([1.0, 2.0, 3.0]), t.const([1.0, 2.0, 3.0])).value == 14.0


def test_backward_examples():
    assert tape_grad(lambda t, x: T.mul(x, x), 3.0) == pytest.approx(6.0, abs=0)
    g = tape_grad(lambda t, v: T.mul(T.take(v, (0,)), T.take(v, (1,))), [2.0, 3.0])
    assert np.array_equal(g, [3.0, 2.0])
    assert np.array_equal(tape_grad(lambda t, x: T.total(x), np.arange(5.0)), np.ones(5))


def test_grad_check_examples():
    assert T.grad_check(lambda t, x: T.total(T.mul(x, 3.0)), [0.7]) <= 1e-10
    assert T.grad_check(lambda t, x: T.total(T.mul(T.mul(x, x), x)), [1.0]) <= 1e-6


def test_grad_check_flags_kink():
    # relu at 0: analytic picks the flat side, central difference averages to 1/2
    assert T.grad_check(lambda t, x: T.total(T.relu(x)), [0.0]) >= 0.5


@pytest.mark.filterwarnings("ignore:invalid value encountered in log:RuntimeWarning")
def test_grad_check_rejects_non_finite():
    with pytest.raises(T.GradCheckError):
        T.grad_check(lambda t, x: T.total(T.log(x)), [-1.0])


def test_grad_check_bad_step():
    with pytest.raises(ValueError):
        T.grad_check(lambda t, x: T.total(x), [1.0], step=0.0)


UNARY = {
    "exp": (T.exp, np.exp, (-2, 2)),
    "log": (T.log, np.log, (0.2, 3)),
    "sqrt": (T.sqrt, np.sqrt, (0.2, 3)),
    "neg": (T.neg, np.negative, (-2, 2)),
    "sigmoid": (T.sigmoid, lambda a: 1 / (1 + np.exp(-a)), (-5, 5)),
    "softplus": (lambda a: T.softplus(a, beta=3.0), lambda a: np.log1p(np.exp(3 * a)) / 3, (-2, 2)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_value_and_gradient_match_numpy(name, rng):
    op, ref, (lo, hi) = UNARY[name]
    x = rng.uniform(lo, hi, 20)
    t = Tape()
    assert np.allclose(op(t.const(x)).value, ref(x), rtol=1e-13, atol=1e-14)
    g = tape_grad(lambda t, v: T.total(op(v)), x)
    numeric = np.array([central_difference(lambda a: ref(a).sum(), x[i:i + 1])[0] for i in range(x.size)])
    assert np.allclose(g, numeric, rtol=1e-6, atol=1e-8)


def test_softplus_is_stable_for_large_inputs():
    t = Tape()
    x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    out = T.softplus(t.const(x), beta=100.0).value
    assert np.all(np.isfinite(out))
    assert out[-1] == 1e4 and out[0] == 0.0
    assert out[2] == pytest.approx(np.log(2.0) / 100.0, rel=1e-15)


def test_sigmoid_saturates_without_overflow():
    t = Tape()
    out = T.sigmoid(t.const(np.array([-1e4, 1e4]))).value
    assert np.array_equal(out, [0.0, 1.0])


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
@settings(max_examples=40, deadline=None)
def test_product_rule(a, b):
    p, q = Parameter(a), Parameter(b)
    t = Tape()
    T.backward(t, T.total(T.mul(t.param(p), t.param(q))))
    assert np.array_equal(p.grad, b) and np.array_equal(q.grad, a)


@given(arrays(np.float64, (3, 4), elements=finite))
@settings(max_examples=30, deadline=None)
def test_sum_axis_and_reshape_gradients_are_ones(a):
    g = tape_grad(lambda t, v: T.total(T.reshape(T.total(v, axis=0), (2, 2))), a)
    assert np.array_equal(g, np.ones((3, 4)))


def test_broadcast_gradients_are_reduced():
    g_b = tape_grad(lambda t, b: T.total(T.add(t.const(np.ones((4, 3))), b)), np.zeros(3))
    assert np.array_equal(g_b, [4.0, 4.0, 4.0])


def test_dot_matches_numpy_jacobian(rng):
    a = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))
    r = rng.normal(size=(4, 2))
    g = tape_grad(lambda t, v: T.total(T.mul(T.dot(t.const(a), v), r)), w)
    assert np.allclose(g, a.T @ r, rtol=1e-14)


def test_cumprod_exclusive_value_and_zero_safe_gradient():
    a = np.array([[0.5, 0.0, 2.0, 3.0]])
    t = Tape()
    assert np.array_equal(T.cumprod_exclusive(t.const(a)).value, [[1.0, 0.5, 0.0, 0.0]])
    r = np.array([[1.0, 2.0, 3.0, 4.0]])

    def f(v):
        out = np.concatenate([[1.0], np.cumprod(v[0, :-1])])
        return float(np.sum(out * r))
    g = tape_grad(lambda t, v: T.total(T.mul(T.cumprod_exclusive(v), r)), a)
    assert np.allclose(g, central_difference(f, a), atol=1e-8)


def test_take_fancy_index_accumulates():
    g = tape_grad(lambda t, v: T.total(T.take(v, (np.array([0, 0, 2]),))), np.zeros(3))
    assert np.array_equal(g, [2.0, 0.0, 1.0])


def test_max_min_clamp_route_gradient():
    g = tape_grad(lambda t, v: T.total(T.maximum(v, 0.5)), np.array([0.0, 1.0]))
    assert np.array_equal(g, [0.0, 1.0])
    g = tape_grad(lambda t, v: T.total(T.minimum(v, 0.5)), np.array([0.0, 1.0]))
    assert np.array_equal(g, [1.0, 0.0])
    g = tape_grad(lambda t, v: T.total(T.clamp(v, 0.0, 1.0)), np.array([-1.0, 0.5, 2.0]))
    assert np.array_equal(g, [0.0, 1.0, 0.0])


def test_concat_variadic_splits_gradient():
    t = Tape()
    a, b, c = Parameter(np.ones((2, 1))), Parameter(np.ones((2, 2))), Parameter(np.ones((2, 3)))
    out = T.concat_all([t.param(a), t.param(b), t.param(c)], axis=1)
    assert out.shape == (2, 6)
    w = np.arange(12.0).reshape(2, 6)
    T.backward(t, T.total(T.mul(out, w)))
    assert np.array_equal(c.grad.reshape(2, 3), w[:, 3:])
    assert np.array_equal(a.grad.reshape(2, 1), w[:, :1])


def test_gather_and_scatter_rows_are_adjoint(rng):
    table = rng.normal(size=(6, 2))
    idx = np.array([1, 1, 4, 0])
    t = Tape()
    got = T.gather_rows(t.const(table), idx).value
    assert np.array_equal(got, table[idx])
    vals = rng.normal(size=(4, 2))
    scattered = T.scatter_rows(t.const(vals), idx, 6).value
    ref = np.zeros((6, 2))
    np.add.at(ref, idx, vals)
    assert np.allclose(scattered, ref, rtol=0, atol=1e-15)
    # <gather(x), y> == <x, scatter(y)>
    assert np.sum(got * vals) == pytest.approx(np.sum(table * scattered), rel=1e-13)


def test_gather_frozen_row_gets_no_gradient():
    p = Parameter(np.ones((4, 2)))
    t = Tape()
    T.backward(t, T.total(T.gather_rows(t.param(p), np.array([0, 3, 3]), frozen_row=3)))
    g = p.grad.reshape(4, 2)
    assert np.array_equal(g[3], [0.0, 0.0]) and np.array_equal(g[0], [1.0, 1.0])


def test_gather_out_of_range_raises():
    t = Tape()
    with pytest.raises(IndexError):
        T.gather_rows(t.const(np.ones((3, 2))), np.array([3]))


def test_row_cotangent_repeated_rows_add():
    rc = T.RowCotangent(np.array([2, 0, 2]), np.array([[1.0], [2.0], [3.0]]), (3, 1))
    assert np.array_equal(rc.dense(), [[2.0], [0.0], [4.0]])


def test_parameter_used_twice_accumulates():
    p = Parameter(np.array([2.0]))
    t = Tape()
    x = t.param(p)
    assert t.param(p) is x
    T.backward(t, T.total(T.add(T.mul(x, x), x)))
    assert p.grad[0] == 5.0


def test_non_trainable_parameter_untouched():
    p = Parameter(np.array([2.0]), trainable=False)
    t = Tape()
    T.backward(t, T.total(T.mul(t.param(p), 3.0)))
    assert p.grad[0] == 0.0


def test_backward_errors():
    t = Tape()
    v = T.mul(t.const([1.0, 2.0]), 2.0)
    with pytest.raises(T.TapeError):
        T.backward(t, v)                       # not scalar
    s = T.total(v)
    T.backward(t, s)
    with pytest.raises(T.TapeError):
        T.backward(t, s)                       # consumed
    other = Tape()
    with pytest.raises(T.TapeError):
        T.backward(other, T.total(Tape().const([1.0])))


def test_forward_arity_and_foreign_nodes():
    t = Tape()
    with pytest.raises(T.TapeError):
        T.forward(t, "add", [t.const(1.0)])
    with pytest.raises(T.TapeError):
        T.add(t.const(1.0), Tape().const(2.0))


def test_release_frees_graph_but_keeps_values():
    t = Tape()
    y = T.exp(t.const([0.0, 1.0]))
    t.release()
    assert len(t) == 0 and y.inputs == () and y.value[0] == 1.0
    with pytest.raises(T.TapeError):
        t.const(1.0)


def test_every_primitive_is_registered():
    expected = {"abs", "add", "clamp", "concat", "cumprod_exclusive", "div", "dot", "exp", "gather_rows",
                "log", "maximum", "minimum", "mul", "neg", "relu", "reshape", "scatter_rows", "sigmoid",
                "softplus", "sqrt", "sub", "sum", "take", "trilinear"}
    assert expected == set(T.PRIMITIVES)
