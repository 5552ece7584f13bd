import numpy as np
import pytest

from hivesdf import tape as T
from hivesdf.field import SdfField, make_mlp
from hivesdf.grid import HierarchicalEncoding
from hivesdf.tape import Parameter


class ProbeNet:
    """Stand-in SDF network: output column 0 is ``fn`` of the raw coordinates,
    the remaining ``feature_dim`` columns are zero."""

    def __init__(self, fn, feature_dim=2):
        self.fn = fn
        self.feature_dim = feature_dim

    def __call__(self, x):
        sdf = T.reshape(self.fn(x), (x.shape[0], 1))
        pad = x.tape.const(np.zeros((x.shape[0], self.feature_dim)))
        return T.concat_all([sdf, pad], axis=1)

    def parameters(self):
        return []


def probe_field(fn, feature_dim=2, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    color = make_mlp([6 + feature_dim, 8, 3], rng, "relu", "sigmoid", name="color")
    return SdfField(HierarchicalEncoding([]), ProbeNet(fn, feature_dim), color,
                    Parameter(np.array([np.log(16.0)]), name="theta"), feature_dim=feature_dim)


def linear_sdf(u, scale=1.0, offset=0.0):
    u = np.asarray(u, dtype=np.float64)

    def fn(x):
        return T.add(T.mul(T.dot(x, x.tape.const(u)), scale), offset)
    return fn


def sphere_sdf(radius=0.5):
    def fn(x):
        return T.sub(T.sqrt(T.total(T.mul(x, x), axis=1)), radius)
    return fn


def constant_sdf(c=0.3):
    def fn(x):
        return T.add(T.mul(T.total(x, axis=1), 0.0), c)
    return fn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x, h=1e-6):
    """Plain numeric gradient of a scalar numpy function; independent of the tape."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += h
        lo[i] -= h
        gf[i] = (f(hi.reshape(x.shape)) - f(lo.reshape(x.shape))) / (2 * h)
    return g


def tape_grad(build, x):
    """Gradient of ``build(tape, node)`` (scalar) w.r.t. ``x`` via backward."""
    p = Parameter(np.array(x, dtype=np.float64))
    tape = T.Tape()
    T.backward(tape, build(tape, tape.param(p)))
    return p.grad.reshape(np.shape(x))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; echoed at the end of the run."""
    def record(number, passed, text):
        status = "N/A" if passed is None else ("PASS" if passed else "FAIL")
        line = f"{status} criterion {number}: {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
