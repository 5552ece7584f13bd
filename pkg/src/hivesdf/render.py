"""Pinhole rays, section sampling and SDF volume rendering."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tape as T
from .field import (SdfField, color_eval, grad_from_probes, grad_probe_offsets, normal_second_grad, s_value, sdf_eval,
                    sdf_spatial_grad, unit_normals)
from .tape import Node, Tape


class RayMiss(ValueError):
    pass


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        return self.cam_to_world[:3, 3].copy()

    def rotation_error(self) -> float:
        r = self.cam_to_world[:3, :3]
        return float(np.abs(r.T @ r - np.eye(3)).max())


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix; camera looks along +z, x right, y down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, fwd)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, eye
    return m


@dataclass
class Rays:
    origins: np.ndarray      # (R, 3)
    dirs: np.ndarray         # (R, 3) unit
    t_near: np.ndarray       # (R,)
    t_far: np.ndarray        # (R,)

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.dirs[idx], self.t_near[idx], self.t_far[idx])


def slab_interval(origins: np.ndarray, dirs: np.ndarray, bound: float = 1.0):
    """Entry/exit distances of rays against the cube [-bound, bound]^3 and a hit mask."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-bound - origins) / dirs
        t2 = (bound - origins) / dirs
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    parallel = dirs == 0
    inside = np.abs(origins) <= bound
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=1), 0.0)
    t_far = hi.min(axis=1)
    return t_near, t_far, t_near < t_far


def pixel_rays(camera: Camera, px: np.ndarray, py: np.ndarray):
    """World-space origins and unit directions through pixel centres."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack([(px + 0.5 - camera.cx) / camera.fx,
                      (py + 0.5 - camera.cy) / camera.fy,
                      np.ones_like(px)], axis=-1)
    d = d_cam @ camera.cam_to_world[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def generate_ray(camera: Camera, px: int, py: int) -> Rays:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height}")
    o, d = pixel_rays(camera, np.array([px]), np.array([py]))
    t_near, t_far, hit = slab_interval(o, d)
    if not hit[0]:
        raise RayMiss(f"ray through pixel ({px}, {py}) misses the domain")
    return Rays(o, d, t_near, t_far)


def generate_rays(camera: Camera, px: np.ndarray, py: np.ndarray) -> tuple[Rays, np.ndarray]:
    """Rays for many pixels; returns the rays that hit the domain and their hit mask."""
    o, d = pixel_rays(camera, px, py)
    t_near, t_far, hit = slab_interval(o, d)
    return Rays(o[hit], d[hit], t_near[hit], t_far[hit]), hit


def sample_ray(t_near, t_far, k: int, rng: np.random.Generator | None = None,
               stratified: bool = False) -> np.ndarray:
    """Section boundaries (R, K+1) partitioning [t_near, t_far].

    Stratified mode moves each interior boundary uniformly inside its own
    stratum of width 1/K, so boundaries stay strictly increasing.
    """
    if k < 2:
        raise ValueError("need at least 2 sections")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    if np.any(~(t_far > t_near)):
        raise ValueError("degenerate ray interval")
    u = np.broadcast_to(np.linspace(0.0, 1.0, k + 1), (t_near.size, k + 1)).copy()
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u[:, 1:-1] += (rng.random((t_near.size, k - 1)) - 0.5) / k
    return t_near[:, None] + (t_far - t_near)[:, None] * u


def logistic(x, s):
    return 1.0 / (1.0 + np.exp(-s * np.asarray(x, dtype=np.float64)))


def section_weights(sdf: Node, s: Node) -> tuple[Node, Node, np.ndarray]:
    """Discrete opacity and weights from SDF values at section boundaries.

    ``sdf`` is (R, K+1); returns alphas (R, K), weights (R, K) and a boolean
    (R, K) mask of sections whose logistic denominator underflowed (their
    alpha is forced to zero).
    """
    tape = sdf.tape
    k = sdf.shape[-1] - 1
    phi = T.sigmoid(T.mul(sdf, s))
    prev = T.take(phi, (Ellipsis, slice(0, k)))
    nxt = T.take(phi, (Ellipsis, slice(1, k + 1)))
    under = prev.value <= 0.0
    safe_prev = T.add(prev, tape.const(under.astype(np.float64)))
    ratio = T.div(T.sub(prev, nxt), safe_prev)
    if under.any():
        ratio = T.mul(ratio, tape.const((~under).astype(np.float64)))
    alpha = T.maximum(ratio, tape.const(0.0))
    trans = T.cumprod_exclusive(T.sub(tape.const(1.0), alpha))
    return alpha, T.mul(alpha, trans), under


def render_color(weights: Node, colors: Node, background=None) -> Node:
    """Sum of w_i * c_i plus the background scaled by the residual transmittance."""
    if weights.shape != colors.shape[:-1]:
        raise ValueError(f"weights {weights.shape} vs colours {colors.shape}")
    tape = weights.tape
    wc = T.total(T.mul(T.reshape(weights, weights.shape + (1,)), colors), axis=-2)
    if background is None:
        return wc
    rest = T.sub(tape.const(1.0), T.total(weights, axis=-1))
    bg = np.asarray(background, dtype=np.float64)
    return T.add(wc, T.mul(T.reshape(rest, rest.shape + (1,)), tape.const(bg)))


def render_normal_grad(weights: Node, ngrad: Node) -> Node:
    if weights.shape != ngrad.shape[:-1]:
        raise ValueError(f"weights {weights.shape} vs normal gradients {ngrad.shape}")
    return T.total(T.mul(T.reshape(weights, weights.shape + (1,)), ngrad), axis=-2)


@dataclass
class RenderConfig:
    n_samples: int = 64
    stratified: bool = True
    background: tuple = (1.0, 1.0, 1.0)
    grad_step: float = 1e-3
    normal_step: float = 1e-3
    normal_rays: int = 128
    normal_sections: int = 4
    midpoint_features: str = "blend"   # "blend": average of boundary features, "eval": extra forward


@dataclass
class RenderOutput:
    rgb: Node                    # (R, 3)
    weights: Node                # (R, K)
    alphas: Node
    boundaries: np.ndarray       # (R, K+1)
    points: np.ndarray           # (R, K+1, 3) boundary points
    normal_grad: Node | None = None      # (Rn, 3)
    underflow: int = 0
    extra_grad: Node | None = None       # (E, 3) SDF gradients at ``extra_points``


def render_rays(fld: SdfField, rays: Rays, tape: Tape, cfg: RenderConfig,
                rng: np.random.Generator | None = None, with_normal: bool = False,
                extra_points: Callable[[np.ndarray], np.ndarray] | None = None) -> RenderOutput:
    """Forward-render a ray batch on ``tape``.

    SDF is evaluated at section boundaries; colour and normal gradients at
    section midpoints. Midpoint features are either the mean of the two
    boundary features ("blend") or a second network evaluation ("eval").
    ``extra_points(boundaries)`` may pick (E, 3) points from the (R, K+1, 3)
    boundary points; their SDF gradients share the same network evaluation.
    """
    if cfg.midpoint_features not in ("blend", "eval"):
        raise ValueError(f"unknown midpoint_features {cfg.midpoint_features!r}")
    r, k = len(rays), cfg.n_samples
    t = sample_ray(rays.t_near, rays.t_far, k, rng, cfg.stratified and rng is not None)
    mid = 0.5 * (t[:, 1:] + t[:, :-1])
    pb = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
    pm = rays.origins[:, None, :] + mid[..., None] * rays.dirs[:, None, :]
    nb = r * (k + 1)
    pts = [pb.reshape(-1, 3)]
    if cfg.midpoint_features == "eval":
        pts.append(pm.reshape(-1, 3))
    n_extra = 0
    if extra_points is not None:
        xe = np.asarray(extra_points(pb), dtype=np.float64).reshape(-1, 3)
        n_extra = len(xe)
        pts.append(np.repeat(xe[None], 6, axis=0).reshape(-1, 3) + grad_probe_offsets(n_extra, cfg.grad_step))
    sdf, feat = sdf_eval(fld, tape.const(np.concatenate(pts) if len(pts) > 1 else pts[0]))
    sdf_b = T.reshape(T.take(sdf, (slice(0, nb),)), (r, k + 1))
    if cfg.midpoint_features == "eval":
        feat_m = T.take(feat, (slice(nb, nb + r * k),))
    else:
        fb = T.reshape(T.take(feat, (slice(0, nb),)), (r, k + 1, feat.shape[-1]))
        feat_m = T.mul(T.add(T.take(fb, (slice(None), slice(0, k))), T.take(fb, (slice(None), slice(1, k + 1)))), 0.5)
        feat_m = T.reshape(feat_m, (r * k, feat.shape[-1]))
    extra_grad = None
    if n_extra:
        extra_grad = grad_from_probes(T.take(sdf, (slice(sdf.shape[0] - 6 * n_extra, None),)), n_extra,
                                      cfg.grad_step)
    alpha, w, under = section_weights(sdf_b, s_value(fld, tape))

    xm = tape.const(pm.reshape(-1, 3))
    vm = tape.const(np.repeat(rays.dirs, k, axis=0))
    nm = None
    if fld.color_normal:
        nm, _ = unit_normals(sdf_spatial_grad(fld, xm, cfg.grad_step))
    colors = T.reshape(color_eval(fld, xm, vm, nm, feat_m), (r, k, 3))
    rgb = render_color(w, colors, cfg.background)

    ngrad = None
    if with_normal and cfg.normal_rays > 0:
        rn = min(cfg.normal_rays, r)
        ks = min(cfg.normal_sections, k)
        order = np.argsort(-w.value[:rn], axis=1, kind="stable")[:, :ks]
        rows = np.repeat(np.arange(rn), ks)
        cols = order.reshape(-1)
        xs = tape.const(pm[rows, cols])
        ng = normal_second_grad(fld, xs, rays.dirs[rows], cfg.normal_step, cfg.grad_step)
        w_sel = T.reshape(T.take(w, (rows, cols)), (rn, ks))
        ngrad = render_normal_grad(w_sel, T.reshape(ng, (rn, ks, 3)))
    return RenderOutput(rgb, w, alpha, t, pb, ngrad, int(under.sum()), extra_grad)


def render_image(fld: SdfField, camera: Camera, cfg: RenderConfig, chunk: int = 1024) -> np.ndarray:
    """Deterministic (H, W, 3) rendering in [0, 1]; rays missing the domain show the background."""
    h, w = camera.height, camera.width
    py, px = np.mgrid[0:h, 0:w]
    rays, hit = generate_rays(camera, px.reshape(-1), py.reshape(-1))
    img = np.tile(np.asarray(cfg.background, dtype=np.float64), (h * w, 1))
    plain = RenderConfig(**{**cfg.__dict__, "stratified": False})
    cols = np.empty((len(rays), 3))
    for s in range(0, len(rays), chunk):
        tape = Tape()
        cols[s:s + chunk] = render_rays(fld, rays.subset(slice(s, s + chunk)), tape, plain).rgb.value
        tape.release()
    img[hit] = cols
    return img.reshape(h, w, 3)
