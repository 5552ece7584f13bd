"""SDF and colour networks on top of the volume encodings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as T
from .grid import HierarchicalEncoding, encode
from .sparse import SparseVolume, interpolate_sparse
from .tape import Node, Parameter, Tape

SOFTPLUS_BETA = 100.0
DEFAULT_THETA = float(np.log(16.0))


class FieldError(FloatingPointError):
    pass


@dataclass
class Mlp:
    """Fully connected network; ``layers`` holds (weight (in, out), bias (out,)) pairs."""

    layers: list[tuple[Parameter, Parameter]]
    hidden: str = "softplus"
    output: str = "none"

    @property
    def widths(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer]

    def __call__(self, x: Node) -> Node:
        tape = x.tape
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = T.add(T.dot(h, tape.param(w)), tape.param(b))
            if i < last:
                h = T.softplus(h, beta=SOFTPLUS_BETA) if self.hidden == "softplus" else T.relu(h)
            elif self.output == "sigmoid":
                h = T.sigmoid(h)
            if not np.isfinite(h.value.sum()):
                raise FieldError(f"non-finite activation after layer {i}")
        return h


def make_mlp(widths: list[int], rng: np.random.Generator, hidden: str = "softplus",
             output: str = "none", name: str = "mlp") -> Mlp:
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
        layers.append((Parameter(w, name=f"{name}.w{i}"), Parameter(np.zeros(b), name=f"{name}.b{i}")))
    return Mlp(layers, hidden, output)


def geometric_init(mlp: Mlp, rng: np.random.Generator, n_xyz: int = 3, radius: float = 0.5) -> None:
    """Set weights so the first output approximates ||x|| - radius.

    Only the first ``n_xyz`` inputs (raw coordinates) get non-zero first-layer
    weights; encoding inputs start disconnected.
    """
    last = len(mlp.layers) - 1
    for i, (w, b) in enumerate(mlp.layers):
        fan_in, fan_out = w.shape
        if i == last:
            vals = rng.normal(np.sqrt(np.pi) / np.sqrt(fan_in), 1e-4, size=w.shape)
            vals[:, 1:] = rng.normal(0.0, 1e-4, size=(fan_in, fan_out - 1))
            bias = np.zeros(fan_out)
            bias[0] = -radius
        else:
            vals = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(fan_out), size=w.shape)
            if i == 0:
                vals[n_xyz:] = 0.0
            bias = np.zeros(fan_out)
        w.values[:] = vals.reshape(-1)
        b.values[:] = bias


@dataclass
class SdfField:
    hierarchy: HierarchicalEncoding
    sdf_net: Mlp
    color_net: Mlp
    theta: Parameter
    sparse_levels: list[SparseVolume] = field(default_factory=list)
    append_x: bool = True
    color_normal: bool = False
    color_feature: bool = True
    feature_dim: int = 16

    @property
    def input_width(self) -> int:
        return (3 if self.append_x else 0) + self.hierarchy.total_channels + \
            sum(s.channels for s in self.sparse_levels)

    def parameters(self) -> list[Parameter]:
        return (self.hierarchy.parameters() + [s.embedding for s in self.sparse_levels]
                + self.sdf_net.parameters() + self.color_net.parameters() + [self.theta])

    def add_sparse_level(self, level: SparseVolume) -> None:
        """Append a sparse level; its first-layer weight rows start at zero so the
        field value is unchanged."""
        w, _ = self.sdf_net.layers[0]
        old = w.view()
        grown = np.concatenate([old, np.zeros((level.channels, old.shape[1]))], axis=0)
        new = Parameter(grown, name=w.name)
        self.sdf_net.layers[0] = (new, self.sdf_net.layers[0][1])
        self.sparse_levels.append(level)


def make_field(hierarchy: HierarchicalEncoding, rng: np.random.Generator, hidden: int = 64,
               layers: int = 2, feature_dim: int = 16, color_hidden: int = 64, color_layers: int = 2,
               append_x: bool = True, color_normal: bool = False, color_feature: bool = True,
               init_radius: float = 0.5, theta: float = DEFAULT_THETA) -> SdfField:
    in_w = (3 if append_x else 0) + hierarchy.total_channels
    sdf_net = make_mlp([in_w] + [hidden] * layers + [1 + feature_dim], rng, "softplus", name="sdf")
    if append_x:
        geometric_init(sdf_net, rng, 3, init_radius)
    color_in = 6 + (3 if color_normal else 0) + (feature_dim if color_feature else 0)
    color_net = make_mlp([color_in] + [color_hidden] * color_layers + [3], rng, "relu", "sigmoid",
                         name="color")
    return SdfField(hierarchy, sdf_net, color_net, Parameter(np.array([theta]), name="theta"),
                    append_x=append_x, color_normal=color_normal, color_feature=color_feature,
                    feature_dim=feature_dim)


def field_input(fld: SdfField, x: Node) -> Node:
    parts = [x] if fld.append_x else []
    if fld.hierarchy.volumes:
        parts.append(encode(fld.hierarchy, x))
    parts.extend(interpolate_sparse(s, x) for s in fld.sparse_levels)
    return T.concat_all(parts, axis=1)


def sdf_eval(fld: SdfField, x: Node) -> tuple[Node, Node]:
    """SDF values (P,) and geometric features (P, G) at points ``x`` (P, 3)."""
    out = fld.sdf_net(field_input(fld, x))
    return T.take(out, (slice(None), 0)), T.take(out, (slice(None), slice(1, None)))


def sdf_only(fld: SdfField, x: Node) -> Node:
    return sdf_eval(fld, x)[0]


_AXES = np.eye(3)


def grad_probe_offsets(p: int, h: float) -> np.ndarray:
    """(6P, 3) offsets +-h along x, y, z for P points, in that order."""
    if h <= 0:
        raise ValueError("h must be positive")
    return np.concatenate([s * h * _AXES[a][None, :].repeat(p, 0)
                           for a in range(3) for s in (1.0, -1.0)], axis=0)


def grad_from_probes(d: Node, p: int, h: float) -> Node:
    """Central differences (P, 3) from SDF values (6P,) at ``grad_probe_offsets``."""
    d = T.reshape(d, (3, 2, p))
    diff = T.sub(T.take(d, (slice(None), 0)), T.take(d, (slice(None), 1)))    # (3, P)
    return _transpose3(T.mul(diff, 0.5 / h))


def sdf_spatial_grad(fld: SdfField, x: Node, h: float = 1e-3) -> Node:
    """Central-difference SDF gradient (P, 3); all six probes are on the tape."""
    p = x.shape[0]
    probes = T.add(T.concat_all([x] * 6, axis=0), x.tape.const(grad_probe_offsets(p, h)))
    return grad_from_probes(sdf_only(fld, probes), p, h)


def _transpose3(a: Node) -> Node:
    """(3, P) -> (P, 3) composed from reshape/concat."""
    p = a.shape[1]
    cols = [T.reshape(T.take(a, (i,)), (p, 1)) for i in range(3)]
    return T.concat_all(cols, axis=1)


def unit_normals(g: Node, eps: float = 1e-8) -> tuple[Node, np.ndarray]:
    """Normalised gradients and the mask of probes whose norm exceeds ``eps``."""
    sq = T.total(T.mul(g, g), axis=1)
    ok = np.sqrt(sq.value) >= eps
    safe = T.add(T.sqrt(sq), g.tape.const(np.where(ok, 0.0, 1.0)))
    n = T.div(g, T.reshape(safe, (-1, 1)))
    return T.mul(n, g.tape.const(ok[:, None].astype(np.float64))), ok


def normal_second_grad(fld: SdfField, x: Node, direction, h: float = 1e-3,
                       h_grad: float | None = None) -> Node:
    """Directional derivative of the unit normal along ``direction`` (P, 3).

    Probes whose SDF gradient norm drops below 1e-8 zero their point's result.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    tape = x.tape
    p = x.shape[0]
    d = np.broadcast_to(np.asarray(direction, dtype=np.float64), (p, 3))
    probes = T.add(T.concat(x, x, axis=0), tape.const(np.concatenate([h * d, -h * d], axis=0)))
    g = sdf_spatial_grad(fld, probes, h if h_grad is None else h_grad)
    n, ok = unit_normals(g)
    both = (ok[:p] & ok[p:]).astype(np.float64)[:, None]
    diff = T.sub(T.take(n, (slice(0, p),)), T.take(n, (slice(p, None),)))
    return T.mul(diff, tape.const(both / (2.0 * h)))


def color_eval(fld: SdfField, x: Node, v: Node, n: Node | None, feat: Node | None) -> Node:
    parts = [x, v]
    if fld.color_normal:
        if n is None:
            raise ValueError("colour network expects normals")
        parts.append(n)
    if fld.color_feature:
        parts.append(feat)
    inp = T.concat_all(parts, axis=1)
    if not np.all(np.isfinite(inp.value)):
        raise FieldError("non-finite colour network input")
    return fld.color_net(inp)


def s_value(fld: SdfField, tape: Tape) -> Node:
    return T.exp(tape.param(fld.theta))


def evaluate_sdf(fld: SdfField, points: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Plain SDF values at (P, 3) points, evaluated in chunks."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(points.shape[0])
    for s in range(0, points.shape[0], chunk):
        tape = Tape()
        out[s:s + chunk] = sdf_only(fld, tape.const(points[s:s + chunk])).value
        tape.release()
    return out
