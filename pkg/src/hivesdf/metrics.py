"""Reconstruction and image metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .surface import Mesh, marching_cubes, sample_field


@dataclass
class ChamferReport:
    accuracy: float
    completeness: float
    chamfer: float
    n_samples: int

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "completeness": self.completeness,
                "chamfer": self.chamfer, "n_samples": self.n_samples}


def sample_mesh(mesh: Mesh, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples and their host-triangle normals."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return pts, mesh.face_normals()[tri]


def nearest_distances(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest-neighbour distance from each point of ``a`` into ``b``."""
    _, idx = cKDTree(b).query(a, k=1)
    d = np.sqrt(np.sum((a - b[idx]) ** 2, axis=1))
    return d, idx


def brute_force_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty(len(a))
    for s in range(0, len(a), 256):
        diff = a[s:s + 256, None, :] - b[None, :, :]
        out[s:s + 256] = np.sqrt(np.sum(diff ** 2, axis=2)).min(axis=1)
    return out


def chamfer_l1(a: np.ndarray, b: np.ndarray) -> ChamferReport:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs two non-empty point sets")
    acc = float(nearest_distances(a, b)[0].mean())
    comp = float(nearest_distances(b, a)[0].mean())
    return ChamferReport(acc, comp, 0.5 * (acc + comp), len(a) + len(b))


def closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a, b, c) to points p, all (M, 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + v[:, None] * ab + w[:, None] * ac
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    cases = [
        ((d1 <= 0) & (d2 <= 0), a),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d6 >= 0) & (d5 <= d6), c),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t_ab[:, None] * ab),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t_ac[:, None] * ac),
        ((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + t_bc[:, None] * (c - b)),
    ]
    done = np.zeros(len(p), dtype=bool)
    for mask, value in cases:
        m = mask & ~done
        out[m] = value[m]
        done |= m
    return out


def nearest_on_mesh(points: np.ndarray, mesh: Mesh, k: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Distance to, and index of, the nearest triangle among the ``k`` closest centroids."""
    tris = mesh.triangles
    centroids = mesh.vertices[tris].mean(axis=1)
    k = min(k, len(tris))
    _, cand = cKDTree(centroids).query(points, k=k)
    cand = np.asarray(cand).reshape(len(points), k)
    best_d = np.full(len(points), np.inf)
    best_t = np.zeros(len(points), dtype=np.int64)
    for j in range(k):
        t = cand[:, j]
        q = closest_on_triangles(points, *(mesh.vertices[tris[t, i]] for i in range(3)))
        d = np.linalg.norm(points - q, axis=1)
        better = d < best_d
        best_d[better] = d[better]
        best_t[better] = t[better]
    return best_d, best_t


def normal_consistency(mesh_a: Mesh, mesh_b: Mesh, n: int, rng: np.random.Generator) -> float:
    """Mean |n_a . n_b| against the nearest triangle of the other mesh, averaged
    over both directions."""
    if mesh_a.is_empty or mesh_b.is_empty:
        raise ValueError("normal consistency needs two non-empty meshes")

    def one_way(src: Mesh, dst: Mesh) -> float:
        pts, nrm = sample_mesh(src, n, rng)
        _, tri = nearest_on_mesh(pts, dst)
        return float(np.mean(np.abs(np.einsum("ij,ij->i", nrm, dst.face_normals()[tri]))))

    return 0.5 * (one_way(mesh_a, mesh_b) + one_way(mesh_b, mesh_a))


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """10 log10(1 / mse) for images in [0, 1]; identical images give +inf."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def ground_truth_mesh(shape, n: int = 256) -> Mesh:
    return marching_cubes(sample_field(shape.sdf, n))


def ground_truth_samples(shape, n: int, rng: np.random.Generator, mesh: Mesh | None = None) -> np.ndarray:
    """Points on the analytic surface: mesh samples pulled onto the level set."""
    from .scene import Sphere, sdf_gradient

    if isinstance(shape, Sphere):
        d = rng.normal(size=(n, 3))
        return np.asarray(shape.center) + shape.radius * d / np.linalg.norm(d, axis=1, keepdims=True)
    mesh = mesh if mesh is not None else ground_truth_mesh(shape)
    pts, _ = sample_mesh(mesh, n, rng)
    for _ in range(5):
        g = sdf_gradient(shape, pts)
        g2 = np.maximum(np.sum(g * g, axis=1, keepdims=True), 1e-12)
        pts = pts - shape.sdf(pts)[:, None] * g / g2
    return pts


def write_report(values: dict, path=None) -> str:
    text = "".join(f"{k} = {v}\n" for k, v in values.items())
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text
