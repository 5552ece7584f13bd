"""Culled high-resolution volumes stored as an index table plus embedding table.

The index table ``T_i`` is a dense signed array over the node lattice whose
entries point into the embedding table ``T_e``. Entry -1 marks a culled node
and resolves to the last row of ``T_e``, which is frozen at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tape as T
from .grid import cell_coords, corner_nodes
from .tape import Node, Parameter


def linear_index(node, n: int):
    """f(x, y, z) = x + y*N + z*N^2; works on a single triple or an (..., 3) array."""
    arr = np.asarray(node, dtype=np.int64)
    if np.any(arr < 0) or np.any(arr >= n):
        raise IndexError(f"node {node} outside [0, {n})^3")
    out = arr[..., 0] + arr[..., 1] * n + arr[..., 2] * (n * n)
    return int(out) if out.ndim == 0 else out


def node_of(index, n: int) -> np.ndarray:
    """Inverse of :func:`linear_index`."""
    index = np.asarray(index, dtype=np.int64)
    return np.stack([index % n, (index // n) % n, index // (n * n)], axis=-1)


class NodeSet:
    """Deduplicated lattice nodes for an N^3 grid, kept sorted by linear index."""

    def __init__(self, nodes, n: int):
        arr = np.asarray(nodes, dtype=np.int64).reshape(-1, 3)
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValueError(f"node coordinates outside [0, {n})")
        self.n = int(n)
        self.indices = np.unique(arr[:, 0] + arr[:, 1] * n + arr[:, 2] * (n * n))

    @classmethod
    def from_indices(cls, indices, n: int) -> "NodeSet":
        out = cls.__new__(cls)
        out.n = int(n)
        out.indices = np.unique(np.asarray(indices, dtype=np.int64))
        return out

    @property
    def nodes(self) -> np.ndarray:
        return node_of(self.indices, self.n)

    def __len__(self) -> int:
        return self.indices.size

    def __contains__(self, node) -> bool:
        idx = linear_index(node, self.n)
        pos = np.searchsorted(self.indices, idx)
        return bool(pos < self.indices.size and self.indices[pos] == idx)

    def __eq__(self, other) -> bool:
        return isinstance(other, NodeSet) and self.n == other.n and np.array_equal(self.indices, other.indices)

    def __repr__(self) -> str:
        return f"NodeSet(n={self.n}, size={len(self)})"


def ball_offsets(r: float) -> np.ndarray:
    """Integer offsets dv with ||dv|| <= r."""
    k = int(np.floor(r))
    rng = np.arange(-k, k + 1)
    dv = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    return dv[(dv ** 2).sum(axis=1) <= r * r + 1e-12]


def dilate(surface: NodeSet, r: float, n: int | None = None) -> NodeSet:
    if r < 0:
        raise ValueError("dilation radius must be non-negative")
    n = surface.n if n is None else n
    if len(surface) == 0:
        return NodeSet.from_indices([], n)
    nodes = surface.nodes
    mask = np.zeros(n ** 3, dtype=bool)
    for dv in ball_offsets(r):
        moved = nodes + dv
        ok = np.all((moved >= 0) & (moved < n), axis=1)
        m = moved[ok]
        mask[m[:, 0] + m[:, 1] * n + m[:, 2] * (n * n)] = True
    return NodeSet.from_indices(np.flatnonzero(mask), n)


@dataclass
class SparseVolume:
    n: int
    channels: int
    index_table: np.ndarray          # int32, length index_n^3
    embedding: Parameter             # (rows + 1, C); last row frozen at zero
    index_n: int = 0                 # lattice of the index table; 0 means n

    def __post_init__(self):
        if not self.index_n:
            self.index_n = self.n

    @property
    def n_valid(self) -> int:
        return self.embedding.shape[0] - 1

    @property
    def fallback_row(self) -> int:
        return self.n_valid

    def table_nodes(self, nodes: np.ndarray) -> np.ndarray:
        """Map full-resolution nodes onto the index-table lattice (nearest node)."""
        if self.index_n == self.n:
            return nodes
        num = nodes * (self.index_n - 1)
        return (2 * num + (self.n - 1)) // (2 * (self.n - 1))

    def rows_for(self, nodes: np.ndarray) -> np.ndarray:
        tn = self.table_nodes(np.asarray(nodes, dtype=np.int64))
        m = self.index_n
        rows = self.index_table[tn[..., 0] + tn[..., 1] * m + tn[..., 2] * (m * m)].astype(np.int64)
        return np.where(rows < 0, self.fallback_row, rows)

    @property
    def lattice(self):
        return (self.n, self.index_table, self.index_n, self.fallback_row)

    def locate(self, x: np.ndarray):
        i0, frac, dfrac = cell_coords(x, self.n)
        return self.rows_for(corner_nodes(i0)), frac, dfrac

    @cached_property
    def valid_pairs(self) -> np.ndarray:
        """(M, 2) row pairs of axis-adjacent table nodes that are both valid."""
        m = self.index_n
        valid = np.flatnonzero(self.index_table >= 0)
        nodes = node_of(valid, m)
        pairs = []
        for axis in range(3):
            nb = nodes.copy()
            nb[:, axis] += 1
            ok = nb[:, axis] < m
            a = valid[ok]
            b = nb[ok, 0] + nb[ok, 1] * m + nb[ok, 2] * (m * m)
            rb = self.index_table[b]
            keep = rb >= 0
            pairs.append(np.stack([self.index_table[a[keep]], rb[keep]], axis=1))
        return np.concatenate(pairs, axis=0).astype(np.int64)


def build_sparse(valid: NodeSet, n: int | None = None, channels: int = 4, init_sigma: float = 0.02,
                 rng: np.random.Generator | None = None, index_n: int | None = None,
                 name: str = "") -> SparseVolume:
    """Index table over ``valid`` (ascending linear index) and a fresh embedding table.

    ``valid`` lives on the index-table lattice (``index_n``, default ``n``).
    """
    n = valid.n if n is None else n
    index_n = index_n or n
    if valid.n != index_n:
        raise ValueError(f"valid set lattice {valid.n} != index lattice {index_n}")
    if len(valid) == 0:
        raise ValueError("valid node set is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    table = np.full(index_n ** 3, -1, dtype=np.int32)
    table[valid.indices] = np.arange(len(valid), dtype=np.int32)
    rows = np.zeros((len(valid) + 1, channels))
    if init_sigma > 0:
        rows[:-1] = rng.normal(0.0, init_sigma, size=(len(valid), channels))
    emb = Parameter(rows, name=name or f"sparse{n}")
    return SparseVolume(n, channels, table, emb, index_n)


def lookup(sparse: SparseVolume, node: Node | np.ndarray | tuple) -> np.ndarray:
    """Embedding row of one lattice node (the zero row for culled nodes)."""
    node = np.asarray(node, dtype=np.int64)
    if np.any(node < 0) or np.any(node >= sparse.n):
        raise IndexError(f"node {tuple(node)} outside [0, {sparse.n})^3")
    return sparse.embedding.view()[sparse.rows_for(node)]


def lookup_rows(sparse: SparseVolume, nodes: np.ndarray, tape: T.Tape) -> Node:
    """Differentiable row lookup for an (M, 3) array of nodes."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if np.any(nodes < 0) or np.any(nodes >= sparse.n):
        raise IndexError("node outside lattice")
    return T.gather_rows(tape.param(sparse.embedding), sparse.rows_for(nodes),
                         frozen_row=sparse.fallback_row)


def interpolate_sparse(sparse: SparseVolume, x: Node) -> Node:
    return T.trilinear(x.tape.param(sparse.embedding), x, sparse.lattice, frozen_row=sparse.fallback_row)
