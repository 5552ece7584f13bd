"""Fast invariant battery: gradient checks, oracles and closed forms."""

from __future__ import annotations

import contextlib
import dataclasses
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from . import tape as T
from .field import SOFTPLUS_BETA, Mlp, field_input, grad_probe_offsets, make_field, make_mlp
from .grid import FeatureVolume, HierarchicalEncoding, init_volume, interpolate
from .loss import color_loss, eikonal_loss, normal_loss, tv_loss
from .render import section_weights
from .sparse import NodeSet, build_sparse, interpolate_sparse
from .tape import Parameter, Tape

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-12
STEP = 1e-4
KINK_MARGIN = 2 * STEP     # central differences must not straddle a kink


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<34} err={self.error:.3e} tol={self.tol:.0e}{extra}"


@contextlib.contextmanager
def perturbed_vjp(name: str, factor: float = 1.01):
    """Temporarily scale every cotangent produced by primitive ``name``."""
    if name not in T.PRIMITIVES:
        raise KeyError(f"unknown primitive {name!r}; known: {', '.join(sorted(T.PRIMITIVES))}")
    prim = T.PRIMITIVES[name]
    original = prim.vjp

    def scaled(*args, **kw):
        out = original(*args, **kw)
        return tuple(_scale(g, factor) for g in out)

    T.PRIMITIVES[name] = dataclasses.replace(prim, vjp=scaled)
    try:
        yield
    finally:
        T.PRIMITIVES[name] = prim


def _scale(g, factor):
    if g is None:
        return None
    if isinstance(g, T.RowCotangent):
        return _ScaledRows(g, factor)
    return g * factor


class _ScaledRows(T.RowCotangent):
    __slots__ = ("inner", "factor")

    def __init__(self, inner, factor):
        self.inner = inner
        self.factor = factor
        self.shape = inner.shape

    def add_to(self, target):
        tmp = np.zeros_like(target)
        self.inner.add_to(tmp)
        target += self.factor * tmp


# ---------------------------------------------------------------- helpers


def param_grad_check(fn: Callable[[Tape], T.Node], params: list[Parameter], step: float = STEP,
                     skip: dict[int, int] | None = None) -> float:
    """grad_check over existing Parameters: backward vs central differences of
    each parameter entry, perturbed in place.

    ``skip`` maps a parameter id to a count of trailing entries left out (a
    frozen row has zero gradient by construction).
    """
    skip = skip or {}
    for p in params:
        p.zero_grad()
    tape = Tape()
    T.backward(tape, fn(tape))
    err = 0.0
    for p in params:
        analytic = p.grad.copy()
        p.zero_grad()
        for i in range(p.values.size - skip.get(p.id, 0)):
            keep = p.values[i]
            p.values[i] = keep + step
            hi = float(fn(Tape()).value)
            p.values[i] = keep - step
            lo = float(fn(Tape()).value)
            p.values[i] = keep
            numeric = (hi - lo) / (2 * step)
            err = max(err, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return err


def _away(rng, size, lo, hi, kinks=(0.0,), margin=KINK_MARGIN):
    """Uniform samples in [lo, hi) at least ``margin`` from every kink."""
    out = rng.uniform(lo, hi, size=size)
    for _ in range(100):
        bad = np.zeros(out.shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(out - k) < margin
        if not bad.any():
            return out
        out[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
    raise RuntimeError("could not sample away from kinks")


def _probe_fwd(a, r):
    return np.sum(a * r), None


def _probe_vjp(g, saved, a, r):
    return g * r, None


# kept out of the registry so a perturbed primitive only shows up in its own check
_PROBE = T.Primitive("probe", 2, _probe_fwd, _probe_vjp)


def _weighted(tape: Tape, node: T.Node, rng) -> T.Node:
    """Scalar sum(node * R) with a fixed random R so no cotangent is uniform."""
    r = tape.const(rng.uniform(0.5, 1.5, size=node.shape))
    out, _ = _PROBE.fwd(node.value, r.value)
    return tape._append(np.asarray(out, dtype=np.float64), inputs=(node, r), prim=_PROBE, saved=None, attrs={})


def _face_safe_points(rng, n_points, n, margin=KINK_MARGIN):
    """Query points inside [-0.95, 0.95]^3 kept ``margin`` away from cell faces."""
    pts = rng.uniform(-0.95, 0.95, size=(n_points, 3))
    cell = 2.0 / (n - 1)
    for _ in range(100):
        u = (pts + 1.0) / cell
        d = np.abs(u - np.round(u)) * cell
        bad = np.any(d < margin, axis=1)
        if not bad.any():
            return pts
        pts[bad] = rng.uniform(-0.95, 0.95, size=(int(bad.sum()), 3))
    raise RuntimeError("could not sample away from cell faces")


# ---------------------------------------------------------------- primitive checks


def _elementwise(name, fn, lo, hi, kinks=()):
    def run(rng, n):
        x = _away(rng, n, lo, hi, kinks) if kinks else rng.uniform(lo, hi, n)
        fr = rng_fixed(rng)
        return T.grad_check(lambda t, a: _weighted(t, fn(t, a), fr), x)
    return name, run


def rng_fixed(rng):
    # same weights for the analytic pass and every finite-difference pass
    state = rng.bit_generator.state
    return _Frozen(state)


class _Frozen:
    def __init__(self, state):
        self.state = state

    def uniform(self, lo, hi, size=None):
        g = np.random.Generator(np.random.PCG64())
        g.bit_generator.state = self.state
        return g.uniform(lo, hi, size=size)


def _binary(name, fn, kink_diff=False, positive_b=False):
    def run(rng, n):
        a = rng.uniform(-2, 2, n)
        b = rng.uniform(0.5, 2, n) * (rng.choice([-1, 1], n) if not positive_b else 1)
        if kink_diff:
            b = a + _away(rng, n, -1, 1)
        x = np.concatenate([a, b])
        fr = rng_fixed(rng)
        return T.grad_check(lambda t, v: _weighted(t, fn(T.take(v, (slice(0, n),)), T.take(v, (slice(n, None),))), fr), x)
    return name, run


def _check_dot(rng, n):
    err = 0.0
    for _ in range(n):
        shapes = [((3,), (3,)), ((2, 3), (3, 4)), ((3,), (3, 2)), ((2, 3), (3,))][rng.integers(4)]
        a = rng.normal(size=shapes[0])
        b = rng.normal(size=shapes[1])
        x = np.concatenate([a.ravel(), b.ravel()])
        fr = rng_fixed(rng)

        def fn(t, v, sa=shapes[0], sb=shapes[1], na=a.size):
            av = T.reshape(T.take(v, (slice(0, na),)), sa)
            bv = T.reshape(T.take(v, (slice(na, None),)), sb)
            return _weighted(t, T.reshape(T.dot(av, bv), (-1,)) if len(sa) + len(sb) > 2 else
                             T.reshape(T.dot(av, bv), (1,)), fr)
        err = max(err, T.grad_check(fn, x))
    return err


def _check_sum(rng, n):
    x = rng.normal(size=(n, 3))
    fr = rng_fixed(rng)
    e1 = T.grad_check(lambda t, v: _weighted(t, T.total(v, axis=1), fr), x)
    e2 = T.grad_check(lambda t, v: T.total(T.exp(v)), x)
    return max(e1, e2)


def _check_gather(rng, n):
    table = rng.normal(size=(20, 3))
    idx = rng.integers(0, 20, size=n)
    fr = rng_fixed(rng)
    e1 = T.grad_check(lambda t, v: _weighted(t, T.gather_rows(v, idx), fr), table)
    # frozen row: its analytic gradient is zero by design; check the other rows
    p = Parameter(table.copy())
    tape = Tape()
    T.backward(tape, _weighted(tape, T.gather_rows(tape.param(p), idx, frozen_row=19), fr))
    e2 = float(np.abs(p.grad.reshape(20, 3)[19]).max())
    return max(e1, e2)


def _check_scatter(rng, n):
    vals = rng.normal(size=(n, 2))
    idx = rng.integers(0, 15, size=n)
    fr = rng_fixed(rng)
    return T.grad_check(lambda t, v: _weighted(t, T.scatter_rows(v, idx, 15), fr), vals)


def _check_trilinear(rng, n):
    size = 5
    table = rng.normal(size=(size ** 3, 3))
    x = _face_safe_points(rng, n, size)
    lat = (size, _kernels.EMPTY_INDEX, size, -1)
    fr = rng_fixed(rng)
    e_tab = T.grad_check(lambda t, v: _weighted(t, T.trilinear(v, t.const(x), lat), fr), table)
    e_x = T.grad_check(lambda t, v: _weighted(t, T.trilinear(t.const(table), v, lat), fr), x)
    return max(e_tab, e_x)


def _check_concat(rng, n):
    x = rng.normal(size=(n, 2))
    fr = rng_fixed(rng)
    return T.grad_check(lambda t, v: _weighted(t, T.concat_all([v, T.exp(v), v], axis=1), fr), x)


def _check_reshape(rng, n):
    x = rng.normal(size=(n, 2))
    fr = rng_fixed(rng)
    return T.grad_check(lambda t, v: _weighted(t, T.exp(T.reshape(v, (2, n))), fr), x)


def _check_take(rng, n):
    x = rng.normal(size=(n, 3))
    rows = rng.integers(0, n, size=n)
    fr = rng_fixed(rng)
    e1 = T.grad_check(lambda t, v: _weighted(t, T.take(v, (slice(1, None), 2)), fr), x)
    e2 = T.grad_check(lambda t, v: _weighted(t, T.take(v, (rows, 1)), fr), x)
    return max(e1, e2)


def _check_cumprod(rng, n):
    x = rng.uniform(-1.5, 1.5, size=(n, 6))
    x[rng.integers(0, n), 2] = 0.0      # exact zero exercises the zero-safe path
    fr = rng_fixed(rng)
    return T.grad_check(lambda t, v: _weighted(t, T.cumprod_exclusive(v), fr), x)


PRIMITIVE_CHECKS: list = [
    _binary("add", T.add),
    _binary("sub", T.sub),
    _binary("mul", T.mul),
    _binary("div", T.div),
    _elementwise("neg", lambda t, a: T.neg(a), -2, 2),
    _elementwise("exp", lambda t, a: T.exp(a), -2, 2),
    _elementwise("log", lambda t, a: T.log(a), 0.2, 3),
    _elementwise("sqrt", lambda t, a: T.sqrt(a), 0.05, 3),
    _elementwise("abs", lambda t, a: T.absolute(a), -2, 2, kinks=(0.0,)),
    _binary("maximum", T.maximum, kink_diff=True),
    _binary("minimum", T.minimum, kink_diff=True),
    _elementwise("clamp", lambda t, a: T.clamp(a, -0.5, 0.7), -1.5, 1.5, kinks=(-0.5, 0.7)),
    _elementwise("sigmoid", lambda t, a: T.sigmoid(a), -6, 6),
    _elementwise("softplus", lambda t, a: T.softplus(a, beta=100.0), -0.05, 0.05),
    _elementwise("relu", lambda t, a: T.relu(a), -2, 2, kinks=(0.0,)),
    ("dot", _check_dot),
    ("sum", _check_sum),
    ("gather_rows", _check_gather),
    ("scatter_rows", _check_scatter),
    ("trilinear", _check_trilinear),
    ("concat", _check_concat),
    ("reshape", _check_reshape),
    ("take", _check_take),
    ("cumprod_exclusive", _check_cumprod),
]


# ---------------------------------------------------------------- composite checks


def _check_interp_dense(rng, n):
    vol = init_volume(4, 3, 0.5, rng)
    x = _face_safe_points(rng, n, 4)
    fr = rng_fixed(rng)
    e_feat = param_grad_check(lambda t: _weighted(t, interpolate(vol, t.const(x)), fr), [vol.features])
    e_pos = T.grad_check(lambda t, v: _weighted(t, interpolate(vol, v), fr), x)
    return max(e_feat, e_pos)


def _check_interp_sparse(rng, n):
    valid = NodeSet(rng.integers(0, 5, size=(40, 3)), 5)
    sp = build_sparse(valid, 5, 2, 0.5, rng)
    x = _face_safe_points(rng, n, 5)
    fr = rng_fixed(rng)
    e_feat = param_grad_check(lambda t: _weighted(t, interpolate_sparse(sp, t.const(x)), fr), [sp.embedding],
                              skip={sp.embedding.id: sp.channels})
    e_pos = T.grad_check(lambda t, v: _weighted(t, interpolate_sparse(sp, v), fr), x)
    return max(e_feat, e_pos)


PREACT_MARGIN = 0.1     # ten softplus widths; also far beyond any STEP-sized move


def clear_preactivations(mlp: Mlp, inputs: np.ndarray, rng, margin: float = PREACT_MARGIN) -> None:
    """Shift hidden biases so no pre-activation over ``inputs`` lies within
    ``margin`` of zero. Each offending unit is pushed wholly to a random side."""
    h = inputs
    for w, b in mlp.layers[:-1]:
        z = h @ w.view() + b.view()
        for j in np.flatnonzero(np.abs(z).min(axis=0) < margin):
            if rng.random() < 0.5:
                b.values[j] += margin - z[:, j].min() + rng.uniform(0.0, 0.2)
            else:
                b.values[j] -= margin + z[:, j].max() + rng.uniform(0.0, 0.2)
        z = h @ w.view() + b.view()
        h = np.logaddexp(0.0, SOFTPLUS_BETA * z) / SOFTPLUS_BETA if mlp.hidden == "softplus" else np.maximum(z, 0.0)


def _check_mlp(rng, n):
    err = 0.0
    x = rng.uniform(-1.0, 1.0, size=(n, 3))
    for hidden, output in (("softplus", "none"), ("relu", "sigmoid")):
        mlp = make_mlp([3, 6, 6, 2], rng, hidden, output, name=f"chk_{hidden}")
        clear_preactivations(mlp, x, rng)
        fr = rng_fixed(rng)
        err = max(err, param_grad_check(lambda t: _weighted(t, mlp(t.const(x)), fr), mlp.parameters()))
    return err


def _check_section_weights(rng, n):
    k = 8
    # decreasing profiles keep every alpha ratio away from the clamp at zero
    steps = rng.uniform(0.02, 0.2, size=(n, k))
    start = rng.uniform(0.2, 0.8, size=(n, 1))
    sdf = np.concatenate([start, start - np.cumsum(steps, axis=1)], axis=1)
    fr = rng_fixed(rng)
    theta = np.array([np.log(8.0)])

    def fn(t, v):
        s_node = T.exp(T.take(v, (slice(0, 1),)))
        prof = T.reshape(T.take(v, (slice(1, None),)), sdf.shape)
        _, w, _ = section_weights(prof, s_node)
        return _weighted(t, w, fr)
    return T.grad_check(fn, np.concatenate([theta, sdf.ravel()]))


def _check_color_loss(rng, n):
    target = rng.uniform(0, 1, size=(n, 3))
    rendered = target + _away(rng, (n, 3), -0.3, 0.3)
    return T.grad_check(lambda t, v: color_loss(v, target), rendered)


def _tiny_field(rng):
    hier = HierarchicalEncoding([init_volume(3, 2, 0.1, rng, name="chk3")])
    return make_field(hier, rng, hidden=6, layers=2, feature_dim=2, color_hidden=4, color_layers=1)


def _check_eikonal(rng, n):
    fld = _tiny_field(rng)
    pts = _face_safe_points(rng, n, 3, margin=KINK_MARGIN + 2e-3)
    probes = (pts[None] + grad_probe_offsets(1, 1e-3)[:, None]).reshape(-1, 3)
    clear_preactivations(fld.sdf_net, field_input(fld, Tape().const(probes)).value, rng)
    params = fld.sdf_net.parameters()
    return param_grad_check(lambda t: eikonal_loss(fld, t.const(pts), 1e-3), params)


def _check_tv(rng, n):
    vol = init_volume(4, 2, 0.5, rng, name="chk_tv")
    # spread values so no neighbour difference sits within a step of zero
    vol.features.values[:] = rng.permutation(np.arange(vol.features.values.size)) * 1e-2
    valid = NodeSet(rng.integers(0, 4, size=(n, 3)), 4)
    sp = build_sparse(valid, 4, 2, 0.5, rng)
    sp.embedding.values[:-2] = rng.permutation(np.arange(sp.embedding.values.size - 2)) * 1e-2
    return param_grad_check(lambda t: tv_loss(t, [vol], [sp]), [vol.features, sp.embedding])


def _check_normal_loss(rng, n):
    g = rng.normal(size=(n, 3))
    return T.grad_check(lambda t, v: normal_loss(v), g)


COMPOSITE_CHECKS: list = [
    ("interpolate(dense)", _check_interp_dense),
    ("interpolate(sparse)", _check_interp_sparse),
    ("mlp", _check_mlp),
    ("section_weights", _check_section_weights),
    ("loss:color", _check_color_loss),
    ("loss:eikonal", _check_eikonal),
    ("loss:tv", _check_tv),
    ("loss:normal", _check_normal_loss),
]


def gradient_checks(rng: np.random.Generator, n_points: int = 100) -> list[CheckResult]:
    out = []
    for kind, table in (("grad", PRIMITIVE_CHECKS), ("grad", COMPOSITE_CHECKS)):
        for name, run in table:
            try:
                err = float(run(rng, n_points))
                detail = ""
            except Exception as exc:       # a crashing check is a failing check
                err, detail = math.inf, f"{type(exc).__name__}: {exc}"
            out.append(CheckResult(f"{kind}:{name}", err, GRAD_TOL, detail))
    return out


# ---------------------------------------------------------------- oracles


def sparse_dense_errors(rng: np.random.Generator, n_points: int = 1000) -> tuple[float, float]:
    """(full occupancy vs dense, partial occupancy vs zero-filled dense) max errors."""
    n, c = 6, 3
    x = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    every = NodeSet.from_indices(np.arange(n ** 3), n)
    full = build_sparse(every, n, c, 0.5, rng)
    dense = FeatureVolume(n, c, Parameter(full.embedding.view()[:-1].copy()))
    t = Tape()
    e_full = np.abs(interpolate_sparse(full, t.const(x)).value - interpolate(dense, t.const(x)).value).max()

    kept = NodeSet(rng.integers(0, n, size=(60, 3)), n)
    part = build_sparse(kept, n, c, 0.5, rng)
    filled = np.zeros((n ** 3, c))
    filled[kept.indices] = part.embedding.view()[:-1]
    zero_dense = FeatureVolume(n, c, Parameter(filled))
    e_part = np.abs(interpolate_sparse(part, t.const(x)).value - interpolate(zero_dense, t.const(x)).value).max()
    return float(e_full), float(e_part)


def logistic_cdf(x, s):
    return 1.0 / (1.0 + np.exp(-s * x))


def weight_closed_form(s: float = 16.0, k: int = 512, d: float = 0.3) -> tuple[float, float]:
    """(sum of weights, 1 - Phi_s(-d) / Phi_s(d)) for a linear profile from +d to -d."""
    t = Tape()
    sdf = np.linspace(d, -d, k + 1)[None, :]
    _, w, _ = section_weights(t.const(sdf), t.const(s))
    return float(w.value.sum()), float(1.0 - logistic_cdf(-d, s) / logistic_cdf(d, s))


def monotone_weight_sum(s: float = 16.0, k: int = 64) -> float:
    t = Tape()
    _, w, _ = section_weights(t.const(np.linspace(-0.5, 0.5, k + 1)[None, :]), t.const(s))
    return float(w.value.sum())


def two_crossing_weights(s: float = 16.0, k: int = 256) -> tuple[float, float]:
    """Weight mass in the first and second halves of a profile crossing zero twice
    (downward at t = 0.25 and t = 0.75)."""
    tt = np.linspace(0.0, 1.0, k + 1)
    sdf = np.where(tt < 0.5, 0.25 - tt, 0.75 - tt)
    t = Tape()
    _, w, _ = section_weights(t.const(sdf[None, :]), t.const(s))
    w = w.value[0]
    return float(w[: k // 2].sum()), float(w[k // 2:].sum())


def tv_constant(rng) -> float:
    vol = FeatureVolume(5, 2, Parameter(np.full((125, 2), 0.37)))
    t = Tape()
    return float(tv_loss(t, [vol]).value)


def eikonal_linear(rng) -> float:
    """Eikonal loss of a field whose SDF is exactly n . x with unit n."""
    fld = _tiny_field(rng)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    w = np.zeros((fld.input_width, 1 + fld.feature_dim))
    w[:3, 0] = direction
    fld.sdf_net = Mlp([(Parameter(w, name="lin.w0"), Parameter(np.zeros(1 + fld.feature_dim), name="lin.b0"))])
    t = Tape()
    return float(eikonal_loss(fld, t.const(rng.uniform(-0.9, 0.9, size=(64, 3))), 1e-3).value)


def oracle_checks(rng: np.random.Generator) -> list[CheckResult]:
    e_full, e_part = sparse_dense_errors(rng)
    total, closed = weight_closed_form()
    first, second = two_crossing_weights()
    return [
        CheckResult("oracle:sparse_full_vs_dense", e_full, ORACLE_TOL),
        CheckResult("oracle:sparse_partial_vs_zero_dense", e_part, ORACLE_TOL),
        CheckResult("weights:closed_form_rel", abs(total - closed) / closed, 1e-2,
                    f"sum={total:.6f} closed={closed:.6f}"),
        CheckResult("weights:monotone_zero", abs(monotone_weight_sum()), 0.0),
        CheckResult("weights:occlusion_order", 0.0 if first > second else 1.0, 0.0,
                    f"first={first:.4f} second={second:.4f}"),
        CheckResult("zero:tv_constant_volume", abs(tv_constant(rng)), 0.0),
        CheckResult("zero:eikonal_linear_field", abs(eikonal_linear(rng)), 1e-12),
    ]


def run_battery(seed: int = 0, n_points: int = 100) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = gradient_checks(rng, n_points) + oracle_checks(rng)
    return results, time.perf_counter() - t0
