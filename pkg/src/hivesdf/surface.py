"""Zero-level-set extraction and the surface footprint used for culling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from skimage import measure

from .sparse import NodeSet

ZERO_NUDGE = 1e-12


@dataclass
class Mesh:
    vertices: np.ndarray                 # (V, 3)
    triangles: np.ndarray                # (F, 3) int
    normals: np.ndarray | None = None    # (V, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("non-finite vertex coordinates")

    @property
    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(length > 0, length, 1.0)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def boundary_edges(self) -> int:
        """Number of undirected edges not shared by exactly two triangles."""
        if self.is_empty:
            return 0
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int(np.sum(counts != 2))


@dataclass
class ScalarGrid:
    n: int
    values: np.ndarray    # (n, n, n) indexed [z, y, x]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.n, self.n, self.n)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid contains non-finite values")

    @property
    def spacing(self) -> float:
        return 2.0 / (self.n - 1)

    def node_points(self) -> np.ndarray:
        return grid_points(self.n)


def grid_points(n: int) -> np.ndarray:
    """World positions of all n^3 nodes, x fastest."""
    c = np.linspace(-1.0, 1.0, n)
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([x, y, z], axis=-1).reshape(-1, 3)


def sample_field(evaluator: Callable[[np.ndarray], np.ndarray], n: int, chunk: int = 262144) -> ScalarGrid:
    if n < 2:
        raise ValueError("need at least 2 nodes per axis")
    pts = grid_points(n)
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], chunk):
        try:
            out[s:s + chunk] = evaluator(pts[s:s + chunk])
        except Exception as exc:
            raise RuntimeError(f"evaluator failed on nodes {s}..{min(s + chunk, len(pts)) - 1} "
                               f"(first point {pts[s].tolist()})") from exc
    return ScalarGrid(n, out)


def marching_cubes(grid: ScalarGrid, iso: float = 0.0) -> Mesh:
    """Classic (Lorensen) marching cubes; vertices linearly interpolated on edges.

    Triangles are wound so their normals point toward increasing values.
    """
    vals = grid.values - iso
    vals = np.where(vals == 0.0, ZERO_NUDGE, vals)
    if vals.min() > 0 or vals.max() < 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(vals, 0.0, method="lorensen", allow_degenerate=False)
    world = -1.0 + verts[:, ::-1] * grid.spacing
    mesh = Mesh(world, faces)
    if mesh.is_empty:
        return mesh
    # orient outward: face normals should follow the field gradient
    centroids = world[faces].mean(axis=1)
    g = _grid_gradient(grid, centroids)
    if np.sum(np.einsum("ij,ij->i", mesh.face_normals(), g)) < 0:
        mesh = Mesh(world, faces[:, ::-1])
    return mesh


def _grid_gradient(grid: ScalarGrid, pts: np.ndarray) -> np.ndarray:
    gz, gy, gx = np.gradient(grid.values, grid.spacing)
    idx = np.clip(np.round((pts + 1.0) / grid.spacing).astype(np.int64), 0, grid.n - 1)
    return np.stack([g[idx[:, 2], idx[:, 1], idx[:, 0]] for g in (gx, gy, gz)], axis=1)


def surface_nodes(grid: ScalarGrid, iso: float = 0.0) -> NodeSet:
    """Corner nodes of every cell holding both a negative and a non-negative value."""
    v = grid.values - iso
    n = grid.n
    lo = np.full((n - 1,) * 3, np.inf)
    hi = np.full((n - 1,) * 3, -np.inf)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                c = v[dz:n - 1 + dz, dy:n - 1 + dy, dx:n - 1 + dx]
                lo = np.minimum(lo, c)
                hi = np.maximum(hi, c)
    cz, cy, cx = np.nonzero((lo < 0) & (hi >= 0))
    if cz.size == 0:
        return NodeSet.from_indices([], n)
    mask = np.zeros((n, n, n), dtype=bool)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                mask[cz + dz, cy + dy, cx + dx] = True
    return NodeSet.from_indices(np.flatnonzero(mask.reshape(-1)), n)


def rescale_nodes(nodes: NodeSet, from_n: int, to_n: int) -> NodeSet:
    """High-resolution nodes whose world position lies inside each source node's
    +-half-cell footprint (closed interval)."""
    if to_n < from_n:
        raise ValueError(f"cannot rescale from {from_n} down to {to_n}")
    if len(nodes) == 0:
        return NodeSet.from_indices([], to_n)
    if from_n == to_n:
        return NodeSet.from_indices(nodes.indices, to_n)
    s = (to_n - 1) / (from_n - 1)
    src = nodes.nodes.astype(np.float64)
    lo = np.clip(np.ceil(src * s - s / 2 - 1e-9), 0, to_n - 1).astype(np.int64)
    hi = np.clip(np.floor(src * s + s / 2 + 1e-9), 0, to_n - 1).astype(np.int64)
    span = int((hi - lo).max()) + 1
    mask = np.zeros(to_n ** 3, dtype=bool)
    for ox in range(span):
        for oy in range(span):
            for oz in range(span):
                j = lo + np.array([ox, oy, oz])
                ok = np.all(j <= hi, axis=1)
                j = j[ok]
                mask[j[:, 0] + j[:, 1] * to_n + j[:, 2] * to_n * to_n] = True
    return NodeSet.from_indices(np.flatnonzero(mask), to_n)


def write_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    for ln in Path(path).read_text().splitlines():
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
