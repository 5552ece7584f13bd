"""Dense node-centred feature volumes and the multi-scale encoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tape as T
from .tape import Node, Parameter

DEFAULT_SIGMA = 0.02
DEFAULT_CHANNELS = 4


def cell_coords(x: np.ndarray, n: int):
    """Lower-corner cell index, in-cell fraction and d(frac)/dx for world points.

    Points are clamped to [-1, 1]^3; a point on an interior cell face belongs
    to the higher cell, points on the top face to the last cell.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite query point")
    scale = 0.5 * (n - 1)
    u = (np.clip(x, -1.0, 1.0) + 1.0) * scale
    i0 = np.minimum(np.floor(u), n - 2).astype(np.int64)
    frac = u - i0
    inside = (x >= -1.0) & (x <= 1.0)
    dfrac = np.where(inside, scale, 0.0)
    return i0, frac, dfrac


CORNER_BITS = np.array([[(k >> 0) & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)])


def corner_nodes(i0: np.ndarray) -> np.ndarray:
    """(P, 8, 3) integer corner nodes of the cells with lower corners ``i0``."""
    return i0[:, None, :] + CORNER_BITS[None, :, :]


def corner_weights(frac: np.ndarray) -> np.ndarray:
    """Trilinear weights (P, 8) for in-cell coordinates ``frac`` (P, 3)."""
    w = np.ones((frac.shape[0], 8))
    for a in range(3):
        bit = CORNER_BITS[:, a]
        w *= np.where(bit, frac[:, a:a + 1], 1.0 - frac[:, a:a + 1])
    return w


def linear_rows(nodes: np.ndarray, n: int) -> np.ndarray:
    return nodes[..., 0] + nodes[..., 1] * n + nodes[..., 2] * (n * n)


@dataclass
class FeatureVolume:
    n: int
    channels: int
    features: Parameter

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"volume needs at least 2 nodes per axis, got {self.n}")
        if len(self.features) != self.n ** 3 * self.channels:
            raise ValueError("feature length does not match n^3 * channels")

    def node_world(self, i, j, k) -> np.ndarray:
        return -1.0 + 2.0 * np.array([i, j, k], dtype=np.float64) / (self.n - 1)

    def grid(self) -> np.ndarray:
        """Features as an (z, y, x, C) array view."""
        return self.features.view().reshape(self.n, self.n, self.n, self.channels)

    @property
    def lattice(self):
        return (self.n, _kernels.EMPTY_INDEX, self.n, -1)

    def locate(self, x: np.ndarray):
        i0, frac, dfrac = cell_coords(x, self.n)
        return linear_rows(corner_nodes(i0), self.n), frac, dfrac


def init_volume(n: int, channels: int = DEFAULT_CHANNELS, sigma: float = DEFAULT_SIGMA,
                rng: np.random.Generator | None = None, name: str = "") -> FeatureVolume:
    if n < 2:
        raise ValueError(f"volume needs at least 2 nodes per axis, got {n}")
    if channels < 1 or sigma < 0:
        raise ValueError("channels must be >= 1 and sigma >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    values = rng.normal(0.0, sigma, size=(n ** 3, channels)) if sigma > 0 else np.zeros((n ** 3, channels))
    return FeatureVolume(n, channels, Parameter(values, name=name or f"volume{n}"))


def interpolate(volume: FeatureVolume, x: Node) -> Node:
    """Trilinear blend of the volume features at points ``x`` (P, 3) -> (P, C)."""
    tape = x.tape
    return T.trilinear(tape.param(volume.features), x, volume.lattice)


@dataclass
class HierarchicalEncoding:
    volumes: list[FeatureVolume] = field(default_factory=list)

    def __post_init__(self):
        ns = [v.n for v in self.volumes]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError(f"volume resolutions must strictly increase, got {ns}")

    @property
    def total_channels(self) -> int:
        return sum(v.channels for v in self.volumes)

    @property
    def resolutions(self) -> list[int]:
        return [v.n for v in self.volumes]

    def parameters(self) -> list[Parameter]:
        return [v.features for v in self.volumes]


def encode(hier: HierarchicalEncoding, x: Node) -> Node:
    """Concatenated features of every volume, lowest resolution first."""
    if not hier.volumes:
        raise ValueError("empty hierarchy")
    return T.concat_all([interpolate(v, x) for v in hier.volumes], axis=1)


def hierarchy_resolutions(max_n: int, levels: int, min_n: int = 2) -> list[int]:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if max_n < min_n or min_n < 2:
        raise ValueError(f"max_n ({max_n}) must be >= min_n ({min_n}) >= 2")
    if levels == 1:
        return [max_n]
    g = (max_n / min_n) ** (1.0 / (levels - 1))
    out: list[int] = []
    for k in range(levels):
        n = int(round(min_n * g ** k))
        if not out or n > out[-1]:
            out.append(n)
    return out


def default_hierarchy(max_n: int = 256, levels: int = 8, channels: int = DEFAULT_CHANNELS,
                      sigma: float = DEFAULT_SIGMA, rng: np.random.Generator | None = None,
                      min_n: int = 2) -> HierarchicalEncoding:
    rng = rng if rng is not None else np.random.default_rng(0)
    ns = hierarchy_resolutions(max_n, levels, min_n)
    return HierarchicalEncoding([init_volume(n, channels, sigma, rng) for n in ns])
