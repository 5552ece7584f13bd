"""Analytic test scenes, sphere-traced image synthesis and dataset files.

A dataset directory holds ``manifest.txt`` (one view basename per line),
``<view>.ppm`` (binary P6, 8-bit) and ``<view>.txt`` camera files: line 1 is
``fx fy cx cy W H`` and lines 2-5 the rows of the 4x4 camera-to-world matrix.
``meta.txt`` carries ``key = value`` scene metadata.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .render import Camera, look_at, pixel_rays, slab_interval


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class CameraFormatError(DatasetError):
    pass


class ImageSizeError(DatasetError):
    pass


# ---------------------------------------------------------------- shapes


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    lipschitz = 1.0

    def sdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def bound(self) -> float:
        return float(np.abs(self.center).max() + self.radius)


@dataclass
class Torus:
    major: float = 0.5
    minor: float = 0.2
    lipschitz = 1.0

    def sdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        q = np.hypot(x[..., 0], x[..., 1]) - self.major
        return np.hypot(q, x[..., 2]) - self.minor

    def bound(self) -> float:
        return self.major + self.minor


@dataclass
class Box:
    half_extents: tuple = (0.4, 0.3, 0.3)
    lipschitz = 1.0

    def sdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        q = np.abs(x) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def bound(self) -> float:
        return float(max(self.half_extents))


@dataclass
class Union:
    shapes: list = field(default_factory=list)

    @property
    def lipschitz(self) -> float:
        return max(s.lipschitz for s in self.shapes)

    def sdf(self, x):
        return np.min(np.stack([s.sdf(x) for s in self.shapes], axis=0), axis=0)

    def bound(self) -> float:
        return max(s.bound() for s in self.shapes)


@dataclass
class BumpySphere:
    """||x|| - r - a sin(kx) sin(ky) sin(kz); only approximately a distance."""

    radius: float = 0.5
    amplitude: float = 0.03
    frequency: float = 5.0

    @property
    def lipschitz(self) -> float:
        return 1.0 + self.amplitude * self.frequency

    def sdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        k = self.frequency
        bumps = np.sin(k * x[..., 0]) * np.sin(k * x[..., 1]) * np.sin(k * x[..., 2])
        return np.linalg.norm(x, axis=-1) - self.radius - self.amplitude * bumps

    def bound(self) -> float:
        return self.radius + abs(self.amplitude)


SHAPES = {
    "sphere": lambda: Sphere(),
    "torus": lambda: Torus(),
    "box": lambda: Box(),
    "union": lambda: Union([Sphere((-0.3, 0.0, 0.0), 0.35), Box((0.25, 0.25, 0.25))]),
    "bumpy": lambda: BumpySphere(),
}


def make_shape(name: str):
    try:
        shape = SHAPES[name]()
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; choose from {', '.join(SHAPES)}") from None
    if shape.bound() >= 0.9:
        raise ValueError(f"shape {name} exceeds the [-0.9, 0.9]^3 box")
    return shape


def analytic_sdf(shape, x) -> np.ndarray:
    return shape.sdf(x)


def sdf_gradient(shape, x, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty(x.shape)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[..., a] = (shape.sdf(x + e) - shape.sdf(x - e)) / (2 * h)
    return g


# ---------------------------------------------------------------- tracing and shading


@dataclass
class Hits:
    hit: np.ndarray      # (R,) bool
    t: np.ndarray        # (R,)
    points: np.ndarray   # (R, 3)
    normals: np.ndarray  # (R, 3), zero where missed


def sphere_trace(shape, origins, dirs, tol: float = 1e-5, max_steps: int = 256) -> Hits:
    """March t += sdf / L until |sdf| < tol; rays leaving the domain cube miss."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t_near, t_far, box_hit = slab_interval(origins, dirs)
    t = t_near.copy()
    active = box_hit.copy()
    hit = np.zeros(len(t), dtype=bool)
    lip = shape.lipschitz
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        d = shape.sdf(origins[idx] + t[idx, None] * dirs[idx])
        done = np.abs(d) < tol
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, d / lip)
        escaped = t[idx] > t_far[idx]
        active[idx[done | escaped]] = False
    points = origins + t[:, None] * dirs
    normals = np.zeros_like(points)
    if hit.any():
        g = sdf_gradient(shape, points[hit])
        normals[hit] = g / np.linalg.norm(g, axis=1, keepdims=True)
    return Hits(hit, np.where(hit, t, np.inf), points, normals)


LIGHT_DIR = np.array([1.0, 1.0, 1.5]) / np.linalg.norm([1.0, 1.0, 1.5])
AMBIENT = 0.15
DIFFUSE = 0.65
SPECULAR = 0.2
SHININESS = 16.0
PALETTE = np.array([
    [0.95, 0.95, 0.95],
    [0.85, 0.35, 0.30],
    [0.30, 0.65, 0.40],
    [0.35, 0.45, 0.85],
    [0.90, 0.75, 0.30],
    [0.65, 0.40, 0.75],
])


def albedo(points, palette=PALETTE, cell: float = 0.25) -> np.ndarray:
    """Palette colour chosen by hashing the point's cell on a ``cell``-sized lattice."""
    c = np.floor((np.asarray(points) + 1.0) / cell).astype(np.int64)
    h = (c[..., 0] * 73856093) ^ (c[..., 1] * 19349663) ^ (c[..., 2] * 83492791)
    return palette[np.abs(h) % len(palette)]


def shade(points, normals, view, palette=PALETTE, colors=None) -> np.ndarray:
    """Lambert + gated Phong highlight; ``view`` points from the surface to the eye."""
    base = albedo(points, palette) if colors is None else np.asarray(colors, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    v = np.asarray(view, dtype=np.float64)
    ndl = np.sum(n * LIGHT_DIR, axis=-1)
    refl = 2.0 * ndl[..., None] * n - LIGHT_DIR
    spec = np.where(ndl > 0, np.maximum(np.sum(refl * v, axis=-1), 0.0) ** SHININESS, 0.0)
    rgb = base * (AMBIENT + DIFFUSE * np.maximum(ndl, 0.0))[..., None] + SPECULAR * spec[..., None]
    return np.clip(rgb, 0.0, 1.0)


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    images: list[np.ndarray]        # (H, W, 3) uint8
    cameras: list[Camera]
    metadata: dict = field(default_factory=dict)
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise DatasetError("image and camera counts differ")
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise ImageSizeError(f"images differ in size: {sorted(shapes)}")
        if not self.names:
            self.names = [f"view_{i:03d}" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def background(self) -> tuple:
        bg = self.metadata.get("background", "1 1 1")
        return tuple(float(v) for v in str(bg).split())


def fibonacci_sphere(n: int, radius: float = 3.0, rng: np.random.Generator | None = None) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    r = np.sqrt(1.0 - z * z)
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if rng is not None:
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        pts = pts @ q.T
    return radius * pts


def default_camera(eye, width: int, height: int, fov_deg: float = 40.0) -> Camera:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(f, f, width / 2, height / 2, width, height, look_at(eye))


def render_view(shape, camera: Camera, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Sphere-traced 8-bit image."""
    py, px = np.mgrid[0:camera.height, 0:camera.width]
    o, d = pixel_rays(camera, px.ravel(), py.ravel())
    hits = sphere_trace(shape, o, d)
    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64), o.shape).copy()
    if hits.hit.any():
        h = hits.hit
        rgb[h] = shade(hits.points[h], hits.normals[h], -d[h])
    return np.round(rgb * 255.0).astype(np.uint8).reshape(camera.height, camera.width, 3)


def synth_dataset(shape, n_views: int, width: int, height: int, seed: int = 0,
                  outdir: str | os.PathLike | None = None, background=(1.0, 1.0, 1.0),
                  shape_name: str = "") -> Dataset:
    if n_views < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(seed)
    eyes = fibonacci_sphere(n_views, 3.0, rng)
    cameras = [default_camera(e, width, height) for e in eyes]
    images = [render_view(shape, c, background) for c in cameras]
    meta = {"shape": shape_name or type(shape).__name__.lower(), "seed": str(seed),
            "background": " ".join(repr(float(b)) for b in background)}
    ds = Dataset(images, cameras, meta)
    if outdir is not None:
        write_dataset(ds, outdir)
    return ds


def write_ppm(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P6" or tokens[3] != "255":
        raise DatasetError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DatasetError(f"{path}: truncated image data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_camera(path, cam: Camera) -> None:
    lines = [" ".join(f"{v:.17g}" for v in (cam.fx, cam.fy, cam.cx, cam.cy)) + f" {cam.width} {cam.height}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in cam.cam_to_world]
    Path(path).write_text("\n".join(lines) + "\n")


def read_camera(path, tol: float = 1e-6) -> Camera:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(rows) != 5 or len(rows[0]) != 6 or any(len(r) != 4 for r in rows[1:]):
        raise CameraFormatError(f"{path}: expected intrinsics line plus 4 matrix rows")
    fx, fy, cx, cy = (float(v) for v in rows[0][:4])
    w, h = int(rows[0][4]), int(rows[0][5])
    m = np.array([[float(v) for v in r] for r in rows[1:]])
    cam = Camera(fx, fy, cx, cy, w, h, m)
    err = cam.rotation_error()
    if err > tol:
        raise CameraFormatError(f"{path}: rotation block not orthonormal (error {err:.3g})")
    return cam


def write_dataset(ds: Dataset, outdir) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for name, im, cam in zip(ds.names, ds.images, ds.cameras):
        write_ppm(out / f"{name}.ppm", im)
        write_camera(out / f"{name}.txt", cam)
    (out / "manifest.txt").write_text("\n".join(ds.names) + "\n")
    (out / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in ds.metadata.items()))
    return out / "manifest.txt"


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.is_file():
        raise MissingFileError(f"missing manifest: {manifest}")
    names = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    images, cameras = [], []
    for name in names:
        for suffix in (".ppm", ".txt"):
            if not (d / f"{name}{suffix}").is_file():
                raise MissingFileError(f"missing file: {d / (name + suffix)}")
        im = read_ppm(d / f"{name}.ppm")
        cam = read_camera(d / f"{name}.txt")
        if im.shape[:2] != (cam.height, cam.width):
            raise ImageSizeError(f"{name}: image {im.shape[1]}x{im.shape[0]} vs camera {cam.width}x{cam.height}")
        if images and im.shape != images[0].shape:
            raise ImageSizeError(f"{name}: size {im.shape} differs from {images[0].shape}")
        images.append(im)
        cameras.append(cam)
    meta = {}
    if (d / "meta.txt").is_file():
        for ln in (d / "meta.txt").read_text().splitlines():
            if "=" in ln:
                k, v = ln.split("=", 1)
                meta[k.strip()] = v.strip()
    return Dataset(images, cameras, meta, names)
