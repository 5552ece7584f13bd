"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive application in execution order, so
node inputs always refer to earlier nodes. Values are float64 arrays; each
primitive carries a vector-Jacobian rule that maps the output cotangent back
onto its inputs. Learnable state lives in :class:`Parameter` objects whose
``grad`` buffers receive the accumulated result of :func:`backward`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Parameter", "Node", "Tape", "Primitive", "PRIMITIVES", "TapeError",
    "GradCheckError", "forward", "backward", "grad_check",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "absolute",
    "maximum", "minimum", "clamp", "sigmoid", "softplus", "relu", "dot",
    "total", "gather_rows", "scatter_rows", "trilinear", "concat", "reshape",
    "take", "cumprod_exclusive",
]


class TapeError(RuntimeError):
    pass


class GradCheckError(ValueError):
    pass


class RowCotangent:
    """Cotangent of a 2-D table that is non-zero only on the listed rows.

    Repeated rows add. Backward scatters these straight into parameter
    gradients instead of materialising a table-sized array.
    """

    __slots__ = ("idx", "vals", "shape")

    def __init__(self, idx: np.ndarray, vals: np.ndarray, shape):
        self.idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        self.vals = np.ascontiguousarray(vals, dtype=np.float64).reshape(self.idx.size, -1)
        self.shape = tuple(shape)

    def add_to(self, target: np.ndarray) -> None:
        _kernels.scatter_into(target, self.idx, self.vals)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.shape[0], int(np.prod(self.shape[1:]))))
        self.add_to(out)
        return out.reshape(self.shape)


class BlendCotangent(RowCotangent):
    """Table cotangent of a trilinear blend: corner weights times ``g``, formed
    only while scattering."""

    __slots__ = ("frac", "g", "frozen")

    def __init__(self, rows: np.ndarray, frac: np.ndarray, g: np.ndarray, frozen: int, shape):
        self.idx = rows
        self.frac = frac
        self.g = np.ascontiguousarray(g)
        self.frozen = frozen
        self.shape = tuple(shape)

    def add_to(self, target: np.ndarray) -> None:
        _kernels.trilinear_scatter(target, self.idx, self.frac, self.g, self.frozen)


_param_ids = itertools.count()


class Parameter:
    """Flat float64 storage with a gradient accumulator of the same length."""

    def __init__(self, values, trainable: bool = True, name: str = "", shape=None):
        arr = np.array(values, dtype=np.float64)
        self.shape = tuple(shape) if shape is not None else arr.shape
        self.values = np.ascontiguousarray(arr).reshape(-1)
        if self.values.size != int(np.prod(self.shape, dtype=np.int64)):
            raise ValueError(f"shape {self.shape} does not match {self.values.size} values")
        self.grad = np.zeros_like(self.values)
        self.trainable = trainable
        self.name = name
        self.id = next(_param_ids)

    def view(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"Parameter({self.name or self.id}, shape={self.shape}, trainable={self.trainable})"


@dataclass(frozen=True)
class Primitive:
    """``fwd(*values, **attrs) -> (out, saved)``; ``vjp(g, saved, *values, **attrs)``
    returns one cotangent (or None) per input."""

    name: str
    arity: int                  # -1: any positive number of inputs
    fwd: Callable
    vjp: Callable
    selective: bool = False     # vjp takes ``needs``: which inputs want a cotangent


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, arity: int, selective: bool = False):
    def deco(fns):
        fwd, vjp = fns()
        PRIMITIVES[name] = Primitive(name, arity, fwd, vjp, selective)
        return fns
    return deco


class Node:
    __slots__ = ("tape", "index", "value", "inputs", "prim", "saved", "attrs", "param")

    def __init__(self, tape, index, value, inputs=(), prim=None, saved=None, attrs=None, param=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.inputs = inputs
        self.prim = prim
        self.saved = saved
        self.attrs = attrs or {}
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.const(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self.tape.const(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return dot(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self) -> str:
        kind = self.prim.name if self.prim else ("param" if self.param else "const")
        return f"Node#{self.index}<{kind}>{self.value.shape}"


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}
        self.consumed = False

    def _append(self, value, **kw) -> Node:
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        node = Node(self, len(self.nodes), value, **kw)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        if isinstance(value, Node):
            if value.tape is not self:
                raise TapeError("node belongs to a different tape")
            return value
        return self._append(np.asarray(value, dtype=np.float64))

    def param(self, p: Parameter) -> Node:
        node = self._param_nodes.get(p.id)
        if node is None:
            node = self._append(p.view(), param=p)
            self._param_nodes[p.id] = node
        return node

    def release(self) -> None:
        """Drop the graph (inputs, saved residuals) so memory is freed without
        waiting for the cycle collector. Node values stay readable."""
        for node in self.nodes:
            node.inputs = ()
            node.saved = None
        self.nodes = []
        self._param_nodes = {}
        self.consumed = True

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_of(args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TapeError("at least one input must be a tape node")


def forward(tape: Tape, primitive: str, inputs: Sequence, **attrs) -> Node:
    """Apply ``primitive`` to ``inputs`` and record the result on ``tape``."""
    prim = PRIMITIVES[primitive]
    if len(inputs) != prim.arity and not (prim.arity < 0 and len(inputs) >= 1):
        raise TapeError(f"{primitive} expects {prim.arity} inputs, got {len(inputs)}")
    nodes = tuple(tape.const(x) for x in inputs)
    for n in nodes:
        if n.tape is not tape:
            raise TapeError("input node belongs to a different tape")
    out, saved = prim.fwd(*(n.value for n in nodes), **attrs)
    return tape._append(np.asarray(out, dtype=np.float64), inputs=nodes, prim=prim,
                        saved=saved, attrs=attrs)


def _apply(name: str, *inputs, **attrs) -> Node:
    return forward(_tape_of(inputs), name, inputs, **attrs)


def backward(tape: Tape, seed: Node) -> None:
    """Accumulate d(seed)/d(param) into every trainable parameter's ``grad``."""
    if tape.consumed:
        raise TapeError("tape already consumed by backward")
    if seed.tape is not tape:
        raise TapeError("seed belongs to a different tape")
    if seed.value.size != 1:
        raise TapeError(f"seed must be scalar, got shape {seed.value.shape}")
    grads: list = [None] * (seed.index + 1)
    owned = np.zeros(seed.index + 1, dtype=bool)    # grads[i] is a private buffer
    row_grads: dict[int, list] = {}                  # param node -> [RowCotangent]
    grads[seed.index] = np.ones_like(seed.value)
    for node in reversed(tape.nodes[: seed.index + 1]):
        g = grads[node.index]
        if node.prim is None:
            p = node.param
            if p is not None and p.trainable:
                if g is not None:
                    p.grad += g.reshape(-1)
                if node.index in row_grads:
                    target = p.grad.reshape(node.value.shape[0], -1)
                    for rc in row_grads[node.index]:
                        rc.add_to(target)
            continue
        if g is None:
            continue
        if node.prim.selective:
            needs = tuple(n.prim is not None or (n.param is not None and n.param.trainable) for n in node.inputs)
            in_grads = node.prim.vjp(g, node.saved, *(n.value for n in node.inputs), needs=needs, **node.attrs)
        else:
            in_grads = node.prim.vjp(g, node.saved, *(n.value for n in node.inputs), **node.attrs)
        for n, gi in zip(node.inputs, in_grads):
            if gi is None or (n.prim is None and n.param is None):
                continue
            if isinstance(gi, RowCotangent):
                if gi.shape != n.value.shape:
                    raise TapeError(f"{node.prim.name}: cotangent shape {gi.shape} != {n.value.shape}")
                if n.prim is None:
                    row_grads.setdefault(n.index, []).append(gi)
                    continue
                gi = gi.dense()
            gi = np.asarray(gi, dtype=np.float64)
            if gi.shape != n.value.shape:
                raise TapeError(f"{node.prim.name}: cotangent shape {gi.shape} != {n.value.shape}")
            acc = grads[n.index]
            if acc is None:
                grads[n.index] = gi
            elif owned[n.index]:
                acc += gi
            else:
                grads[n.index] = acc + gi
                owned[n.index] = True
        grads[node.index] = None
    tape.release()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


@_register("add", 2)
def _add():
    def fwd(a, b):
        return a + b, None

    def vjp(g, _, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return fwd, vjp


@_register("sub", 2)
def _sub():
    def fwd(a, b):
        return a - b, None

    def vjp(g, _, a, b):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return fwd, vjp


@_register("mul", 2)
def _mul():
    def fwd(a, b):
        return a * b, None

    def vjp(g, _, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    return fwd, vjp


@_register("div", 2)
def _div():
    def fwd(a, b):
        out = a / b
        return out, out

    def vjp(g, out, a, b):
        gb = g / b
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)
    return fwd, vjp


@_register("neg", 1)
def _neg():
    return (lambda a: (-a, None)), (lambda g, _, a: (-g,))


@_register("exp", 1)
def _exp():
    def fwd(a):
        out = np.exp(a)
        return out, out
    return fwd, (lambda g, out, a: (g * out,))


@_register("log", 1)
def _log():
    return (lambda a: (np.log(a), None)), (lambda g, _, a: (g / a,))


@_register("sqrt", 1)
def _sqrt():
    def fwd(a):
        out = np.sqrt(a)
        return out, out

    def vjp(g, out, a):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)
    return fwd, vjp


@_register("abs", 1)
def _abs():
    return (lambda a: (np.abs(a), None)), (lambda g, _, a: (g * np.sign(a),))


@_register("maximum", 2)
def _maximum():
    # ties send the whole cotangent to the first argument
    def fwd(a, b):
        return np.maximum(a, b), None

    def vjp(g, _, a, b):
        m = a >= b
        return _unbroadcast(np.where(m, g, 0.0), a.shape), _unbroadcast(np.where(m, 0.0, g), b.shape)
    return fwd, vjp


@_register("minimum", 2)
def _minimum():
    def fwd(a, b):
        return np.minimum(a, b), None

    def vjp(g, _, a, b):
        m = a <= b
        return _unbroadcast(np.where(m, g, 0.0), a.shape), _unbroadcast(np.where(m, 0.0, g), b.shape)
    return fwd, vjp


@_register("clamp", 1)
def _clamp():
    def fwd(a, lo=-np.inf, hi=np.inf):
        return np.clip(a, lo, hi), None

    def vjp(g, _, a, lo=-np.inf, hi=np.inf):
        return (np.where((a > lo) & (a < hi), g, 0.0),)
    return fwd, vjp


_BLOCK = 1 << 14


def _stable_sigmoid(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@_register("sigmoid", 1)
def _sigmoid():
    def fwd(a):
        out = _stable_sigmoid(a)
        return out, out
    return fwd, (lambda g, out, a: (g * out * (1.0 - out),))


@_register("softplus", 1)
def _softplus():
    def fwd(a, beta=1.0):
        out = np.empty_like(a)
        deriv = np.empty_like(a)
        flat, o_flat, d_flat = a.reshape(-1), out.reshape(-1), deriv.reshape(-1)
        # cache-sized blocks; the derivative sigmoid(beta * a) is kept for the vjp
        for s in range(0, flat.size, _BLOCK):
            x = flat[s:s + _BLOCK]
            o = o_flat[s:s + _BLOCK]
            d = d_flat[s:s + _BLOCK]
            e = np.multiply(x, -beta)
            np.abs(e, out=e)
            np.negative(e, out=e)
            np.exp(e, out=e)                  # exp(-|beta x|)
            np.log1p(e, out=o)
            o *= 1.0 / beta
            o += np.maximum(x, 0.0)
            # sigmoid(beta x) = (1 + sign(x) tanh(|beta x| / 2)) / 2, branch free
            np.subtract(1.0, e, out=d)
            e += 1.0
            d /= e
            np.copysign(d, x, out=d)
            d *= 0.5
            d += 0.5
        return out, deriv
    return fwd, (lambda g, deriv, a, beta=1.0: (g * deriv,))


@_register("relu", 1)
def _relu():
    return (lambda a: (np.maximum(a, 0.0), None)), (lambda g, _, a: (g * (a > 0),))


# ---------------------------------------------------------------- linear algebra


@_register("dot", 2)
def _dot():
    """1-D inner product, or (P, n) @ (n, m) matrix product."""

    def fwd(a, b):
        if a.ndim == 1 and b.ndim == 1 and a.shape != b.shape:
            raise TapeError(f"dot shape mismatch {a.shape} vs {b.shape}")
        return a @ b, None

    def vjp(g, _, a, b):
        if a.ndim == 1 and b.ndim == 1:
            return g * b, g * a
        if a.ndim == 1:
            return b @ g, np.outer(a, g)
        if b.ndim == 1:
            return np.outer(g, b), a.T @ g
        return g @ b.T, a.T @ g
    return fwd, vjp


@_register("sum", 1)
def _sum():
    def fwd(a, axis=None):
        return np.sum(a, axis=axis), None

    def vjp(g, _, a, axis=None):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return fwd, vjp


# ---------------------------------------------------------------- tables / structure


@_register("gather_rows", 1)
def _gather_rows():
    def fwd(table, idx=None, frozen_row=None):
        flat = np.asarray(idx, dtype=np.int64).reshape(-1)
        if flat.size and (flat.min() < 0 or flat.max() >= table.shape[0]):
            raise IndexError(f"row index out of range for a table of {table.shape[0]} rows")
        rows = _kernels.take_rows(np.ascontiguousarray(table.reshape(table.shape[0], -1)), flat)
        return rows.reshape(np.shape(idx) + table.shape[1:]), None

    def vjp(g, _, table, idx=None, frozen_row=None):
        flat = np.asarray(idx, dtype=np.int64).reshape(-1)
        vals = g.reshape(flat.size, -1)
        if frozen_row is not None:
            vals = np.where((flat == frozen_row)[:, None], 0.0, vals)
        if table.ndim == 2:
            return (RowCotangent(flat, vals, table.shape),)
        return (_scatter_add(vals, flat, table.shape[0], table.shape[1:]),)
    return fwd, vjp


@_register("scatter_rows", 1)
def _scatter_rows():
    def fwd(values, idx=None, n_rows=0):
        return _scatter_add(values, idx, n_rows, values.shape[idx.ndim:]), None

    def vjp(g, _, values, idx=None, n_rows=0):
        return (g[idx],)
    return fwd, vjp


def _scatter_add(values: np.ndarray, idx: np.ndarray, n_rows: int, tail) -> np.ndarray:
    flat_idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    vals = np.ascontiguousarray(values.reshape(flat_idx.size, -1))
    return _kernels.scatter_add_rows(vals, flat_idx, n_rows).reshape((n_rows,) + tuple(tail))


@_register("trilinear", 2, selective=True)
def _trilinear():
    """Blend of table rows at the 8 cell corners around each query point.

    ``lattice = (n, index_table, index_n, fallback)``: nodes per axis, and for
    sparse tables the index table, its lattice size and the culled-node row.
    Dense tables pass an empty index table.
    """

    def fwd(table, x, lattice=None, frozen_row=None):
        n, index_table, index_n, fallback = lattice
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite query point")
        out, rows, frac, dfrac = _kernels.trilinear_fwd(np.ascontiguousarray(table), np.ascontiguousarray(x),
                                                         n, index_table, index_n, fallback)
        return out, (rows, frac, dfrac)

    def vjp(g, saved, table, x, lattice=None, frozen_row=None, needs=(True, True)):
        rows, frac, dfrac = saved
        frozen = -1 if frozen_row is None else int(frozen_row)
        g_table = BlendCotangent(rows, frac, g, frozen, table.shape) if needs[0] else None
        g_x = None
        if needs[1]:
            g_x = _kernels.trilinear_grad_x(np.ascontiguousarray(g), np.ascontiguousarray(table), rows, frac, dfrac)
        return g_table, g_x
    return fwd, vjp


@_register("concat", -1)
def _concat():
    def fwd(*parts, axis=-1):
        return np.concatenate(parts, axis=axis), np.cumsum([p.shape[axis] for p in parts[:-1]])

    def vjp(g, splits, *parts, axis=-1):
        return tuple(np.split(g, splits, axis=axis))
    return fwd, vjp


@_register("reshape", 1)
def _reshape():
    return (lambda a, shape=None: (a.reshape(shape), None)), \
        (lambda g, _, a, shape=None: (g.reshape(a.shape),))


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer)) for k in keys)


@_register("take", 1)
def _take():
    def fwd(a, key=None):
        return a[key], None

    def vjp(g, _, a, key=None):
        out = np.zeros_like(a)
        if _is_basic(key):
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)
    return fwd, vjp


@_register("cumprod_exclusive", 1)
def _cumprod_exclusive():
    """out[..., i] = prod_{j<i} a[..., j] along the last axis (out[..., 0] = 1)."""

    def fwd(a):
        out = np.ones_like(a)
        if a.shape[-1] > 1:
            out[..., 1:] = np.cumprod(a[..., :-1], axis=-1)
        return out, out

    def vjp(g, out, a):
        # d out_i / d a_j = prod_{k<i, k!=j} a_k for i > j; zero-safe reverse scan
        k = a.shape[-1]
        s = np.zeros(a.shape[:-1])
        ga = np.zeros_like(a)
        for j in range(k - 2, -1, -1):
            s = g[..., j + 1] + a[..., j + 1] * s if j + 1 < k - 1 else g[..., j + 1]
            ga[..., j] = out[..., j] * s
        return (ga,)
    return fwd, vjp


# ---------------------------------------------------------------- public wrappers


def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def div(a, b):
    return _apply("div", a, b)


def neg(a):
    return _apply("neg", a)


def exp(a):
    return _apply("exp", a)


def log(a):
    return _apply("log", a)


def sqrt(a):
    return _apply("sqrt", a)


def absolute(a):
    return _apply("abs", a)


def maximum(a, b):
    return _apply("maximum", a, b)


def minimum(a, b):
    return _apply("minimum", a, b)


def clamp(a, lo=-np.inf, hi=np.inf):
    return _apply("clamp", a, lo=lo, hi=hi)


def sigmoid(a):
    return _apply("sigmoid", a)


def softplus(a, beta=1.0):
    return _apply("softplus", a, beta=beta)


def relu(a):
    return _apply("relu", a)


def dot(a, b):
    return _apply("dot", a, b)


def total(a, axis=None):
    return _apply("sum", a, axis=axis)


def gather_rows(table, idx, frozen_row=None):
    return _apply("gather_rows", table, idx=np.asarray(idx), frozen_row=frozen_row)


def scatter_rows(values, idx, n_rows):
    return _apply("scatter_rows", values, idx=np.asarray(idx), n_rows=n_rows)


def trilinear(table, x, lattice, frozen_row=None):
    return _apply("trilinear", table, x, lattice=lattice, frozen_row=frozen_row)


def concat(a, b, axis=-1):
    return _apply("concat", a, b, axis=axis)


def reshape(a, shape):
    return _apply("reshape", a, shape=tuple(shape))


def take(a, key):
    return _apply("take", a, key=key)


def cumprod_exclusive(a):
    return _apply("cumprod_exclusive", a)


def concat_all(parts: Sequence, axis=-1):
    return parts[0] if len(parts) == 1 else _apply("concat", *parts, axis=axis)


# ---------------------------------------------------------------- gradient check


def grad_check(fn: Callable[[Tape, Node], Node], point, step: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``fn(tape, x)`` must build a scalar node from the input node ``x``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=np.float64)
    p = Parameter(point.copy(), name="grad_check")
    tape = Tape()
    out = fn(tape, tape.param(p))
    if not np.all(np.isfinite(out.value)):
        raise GradCheckError(f"non-finite function value {out.value}")
    backward(tape, out)
    analytic = p.grad

    def f(vals):
        t = Tape()
        v = fn(t, t.const(vals.reshape(point.shape))).value
        if not np.all(np.isfinite(v)):
            raise GradCheckError(f"non-finite function value {v}")
        return float(v)

    flat = point.reshape(-1)
    err = 0.0
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        numeric = (f(hi) - f(lo)) / (2 * step)
        err = max(err, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return err
