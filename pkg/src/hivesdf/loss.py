"""Training objectives and their weighted combination."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tape as T
from .field import SdfField, sdf_spatial_grad
from .grid import FeatureVolume
from .sparse import SparseVolume
from .tape import Node, Tape


class LossError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    lambda_eik: float = 0.1
    lambda_tv: float = 0.01
    lambda_normal: float = 0.001

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and non-negative, got {v}")


@dataclass
class LossReport:
    color: float
    eikonal: float
    tv: float
    normal: float
    total: float
    n_rays: int = 0

    def tsv(self, iteration: int) -> str:
        return "\t".join([str(iteration)] + [repr(float(v)) for v in
                                             (self.color, self.eikonal, self.tv, self.normal, self.total)])


def color_loss(rendered: Node, target: np.ndarray, kind: str = "l1") -> Node:
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    if target.size == 0:
        raise ValueError("empty batch")
    diff = T.sub(rendered, rendered.tape.const(target))
    per = T.absolute(diff) if kind == "l1" else T.mul(diff, diff)
    return T.mul(T.total(per), 1.0 / target.size)


def eikonal_loss(fld: SdfField, points: Node, h: float = 1e-3) -> Node:
    """mean (||grad sdf|| - 1)^2 over ``points`` (P, 3)."""
    if points.shape[0] == 0:
        raise ValueError("empty point set")
    return eikonal_from_grad(sdf_spatial_grad(fld, points, h))


def eikonal_from_grad(g: Node) -> Node:
    """Eikonal penalty from precomputed SDF gradients (P, 3)."""
    norm = T.sqrt(T.total(T.mul(g, g), axis=1))
    d = T.sub(norm, g.tape.const(1.0))
    return T.mul(T.total(T.mul(d, d)), 1.0 / g.shape[0])


def _dense_tv(tape: Tape, vol: FeatureVolume) -> Node:
    n, c = vol.n, vol.channels
    g = T.reshape(tape.param(vol.features), (n, n, n, c))   # (z, y, x, C)
    parts = []
    for axis in range(3):
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(0, n - 1)
        parts.append(T.total(T.absolute(T.sub(T.take(g, tuple(hi)), T.take(g, tuple(lo))))))
    return T.add(T.add(parts[0], parts[1]), parts[2])


def _pair_tv(tape: Tape, param, pairs: np.ndarray, frozen_row: int | None) -> Node:
    table = tape.param(param)
    a = T.gather_rows(table, pairs[:, 0], frozen_row=frozen_row)
    b = T.gather_rows(table, pairs[:, 1], frozen_row=frozen_row)
    return T.total(T.absolute(T.sub(b, a)))


def dense_pairs(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` axis-adjacent row pairs of an n^3 volume drawn uniformly from all
    3 n^2 (n-1) of them."""
    axis = rng.integers(0, 3, size=m)
    lo = rng.integers(0, n, size=(m, 3))
    lo[np.arange(m), axis] = rng.integers(0, n - 1, size=m)
    a = lo[:, 0] + lo[:, 1] * n + lo[:, 2] * n * n
    return np.stack([a, a + n ** axis], axis=1)


def tv_loss(tape: Tape, dense: list[FeatureVolume], sparse: list[SparseVolume] = (),
            normalize: bool = True, max_pairs: int | None = None,
            rng: np.random.Generator | None = None) -> Node:
    """Absolute differences of axis-adjacent features summed over every volume.

    Sparse volumes only count pairs whose two nodes are both valid. With
    ``normalize`` the sum is divided by the number of pairs. A volume with
    more than ``max_pairs`` pairs contributes a random draw of that many,
    rescaled so the result is an unbiased estimate of the full sum.
    """
    if max_pairs is not None and rng is None:
        raise ValueError("sampled TV needs an rng")
    terms = []
    count = 0
    for vol in dense:
        n_pairs = 3 * vol.n * vol.n * (vol.n - 1)
        if max_pairs is not None and max_pairs < n_pairs:
            pairs = dense_pairs(vol.n, max_pairs, rng)
            terms.append(T.mul(_pair_tv(tape, vol.features, pairs, None), n_pairs / max_pairs))
        else:
            terms.append(_dense_tv(tape, vol))
        count += n_pairs
    for vol in sparse:
        pairs = vol.valid_pairs
        if pairs.shape[0] == 0:
            continue
        if max_pairs is not None and max_pairs < pairs.shape[0]:
            pick = rng.integers(0, pairs.shape[0], size=max_pairs)
            s = T.mul(_pair_tv(tape, vol.embedding, pairs[pick], vol.fallback_row), pairs.shape[0] / max_pairs)
        else:
            s = _pair_tv(tape, vol.embedding, pairs, vol.fallback_row)
        terms.append(s)
        count += pairs.shape[0]
    if not terms:
        return tape.const(0.0)
    out = T.concat_all([T.reshape(t, (1,)) for t in terms], axis=0)
    out = T.total(out)
    return T.mul(out, 1.0 / count) if normalize else out


def normal_loss(ngrad: Node) -> Node:
    """Mean Euclidean norm of per-ray accumulated normal gradients (R, 3)."""
    if ngrad.shape[0] == 0:
        raise ValueError("empty batch")
    norms = T.sqrt(T.total(T.mul(ngrad, ngrad), axis=1))
    return T.mul(T.total(norms), 1.0 / ngrad.shape[0])


def total_loss(components: dict[str, Node], weights: LossWeights, n_rays: int = 0) -> tuple[Node, LossReport]:
    """Weighted sum color + l_eik*eikonal + l_tv*tv + l_normal*normal.

    Missing components count as zero. Raises :class:`LossError` naming the
    first non-finite component.
    """
    tape = next(iter(components.values())).tape
    vals = {}
    for name in ("color", "eikonal", "tv", "normal"):
        node = components.get(name)
        if node is None:
            node = tape.const(0.0)
            components[name] = node
        vals[name] = float(np.asarray(node.value).reshape(()))
    bad = [k for k, v in vals.items() if not math.isfinite(v)]
    if bad:
        breakdown = " ".join(f"{k}={v!r}" for k, v in vals.items())
        raise LossError(f"non-finite {bad[0]} loss ({breakdown})")
    total = components["color"]
    for name, lam in (("eikonal", weights.lambda_eik), ("tv", weights.lambda_tv),
                      ("normal", weights.lambda_normal)):
        if lam != 0.0:
            total = T.add(total, T.mul(components[name], lam))
    tv = float(np.asarray(total.value).reshape(()))
    report = LossReport(vals["color"], vals["eikonal"], vals["tv"], vals["normal"], tv, n_rays)
    return total, report
