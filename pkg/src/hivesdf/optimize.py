"""Adam, learning-rate schedules, staged training with culling, checkpoints."""

from __future__ import annotations

import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from . import tape as T
from .field import FieldError, Mlp, SdfField, evaluate_sdf, make_field
from .grid import FeatureVolume, HierarchicalEncoding, default_hierarchy
from .loss import LossError, LossReport, LossWeights, color_loss, eikonal_from_grad, normal_loss, total_loss, tv_loss
from .render import RenderConfig, Rays, generate_rays, render_rays
from .scene import Dataset
from .sparse import SparseVolume, build_sparse, dilate
from .surface import rescale_nodes, sample_field, surface_nodes
from .tape import Parameter, Tape

log = logging.getLogger(__name__)

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8
MLP_LR = 5e-4
MLP_FINAL = 1.0 / 20.0
VOLUME_FINAL = 1.0 / 100.0
VOLUME_LR = {2: 1e-2, 4: 1e-2, 8: 1e-2, 16: 1e-2, 32: 1e-2, 64: 1e-3, 128: 1e-3,
             256: 1e-4, 512: 1e-4, 1024: 1e-4}
CULL_SAMPLE_CAP = 256


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    moments: dict = field(default_factory=dict)    # name -> [m, v, step]
    t: int = 0

    def slot(self, p: Parameter):
        s = self.moments.get(p.name)
        if s is None or s[0].shape != p.values.shape:
            s = [np.zeros_like(p.values), np.zeros_like(p.values), 0]
            self.moments[p.name] = s
        return s


def adam_step(p: Parameter, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of ``p`` from ``p.grad``; the gradient is then zeroed."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    m, v, step = state.slot(p)
    g = p.grad
    if g.shape != p.values.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {p.values.shape}")
    step += 1
    state.moments[p.name][2] = step
    _kernels.adam_update(p.values, g, m, v, lr, BETA1, BETA2, EPS, 1.0 - BETA1 ** step, 1.0 - BETA2 ** step)


# ---------------------------------------------------------------- schedules


@dataclass
class Schedule:
    base_lr: float
    final_factor: float
    total_iters: int

    def __post_init__(self):
        if not 0 < self.final_factor <= 1:
            raise ValueError("final_factor must be in (0, 1]")

    def lr(self, it: int) -> float:
        if self.total_iters <= 0:
            return self.base_lr
        frac = min(max(it, 0), self.total_iters) / self.total_iters
        return self.base_lr * self.final_factor ** frac


def volume_base_lr(n: int) -> float:
    """Rate for a volume with ``n`` nodes per axis; the nearest power of two in
    log scale decides for resolutions missing from the table."""
    if n in VOLUME_LR:
        return VOLUME_LR[n]
    key = min(VOLUME_LR, key=lambda r: (abs(math.log2(r) - math.log2(n)), r))
    return VOLUME_LR[key]


def make_schedule(group, total_iters: int, theta_lr: float = MLP_LR) -> Schedule:
    if group == "mlp":
        return Schedule(MLP_LR, MLP_FINAL, total_iters)
    if group == "theta":
        return Schedule(theta_lr, MLP_FINAL, total_iters)
    if isinstance(group, tuple) and group[0] == "volume":
        return Schedule(volume_base_lr(int(group[1])), VOLUME_FINAL, total_iters)
    raise KeyError(f"unknown parameter group {group!r}")


def lr_for(group, it: int, total_iters: int, theta_lr: float = MLP_LR) -> float:
    return make_schedule(group, total_iters, theta_lr).lr(it)


def parameter_groups(fld: SdfField) -> list[tuple[Parameter, object]]:
    out = [(v.features, ("volume", v.n)) for v in fld.hierarchy.volumes]
    out += [(s.embedding, ("volume", s.n)) for s in fld.sparse_levels]
    out += [(p, "mlp") for p in fld.sdf_net.parameters() + fld.color_net.parameters()]
    out.append((fld.theta, "theta"))
    return out


# ---------------------------------------------------------------- plans and config


@dataclass
class Stage:
    iters: int
    kind: str = "dense"          # "dense" or "sparse"
    resolution: int = 64
    levels: int = 6
    dilation: float = 3.0

    def __post_init__(self):
        if self.kind not in ("dense", "sparse"):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.iters < 0:
            raise ValueError("stage budget must be non-negative")


@dataclass
class StagePlan:
    stages: list[Stage]

    def __post_init__(self):
        if not self.stages or self.stages[0].kind != "dense":
            raise ValueError("plan must start with a dense stage")
        res = [s.resolution for s in self.stages]
        if any(b < a for a, b in zip(res, res[1:])):
            raise ValueError(f"stage resolutions must be non-decreasing: {res}")
        if any(s.kind != "sparse" for s in self.stages[1:]):
            raise ValueError("later stages must add sparse volumes")

    @property
    def total_iters(self) -> int:
        return sum(s.iters for s in self.stages)


def desk_plan() -> StagePlan:
    return StagePlan([Stage(3000, "dense", 64, levels=6), Stage(1000, "sparse", 128), Stage(2000, "sparse", 256)])


def full_plan() -> StagePlan:
    return StagePlan([Stage(80000, "dense", 256, levels=8), Stage(20000, "sparse", 512),
                      Stage(200000, "sparse", 1024)])


@dataclass
class TrainConfig:
    batch_size: int = 512
    weights: LossWeights = field(default_factory=LossWeights)
    render: RenderConfig = field(default_factory=RenderConfig)
    channels: int = 4
    min_resolution: int = 2
    init_sigma: float = 0.02
    hidden: int = 64
    layers: int = 2
    feature_dim: int = 16
    color_hidden: int = 64
    color_layers: int = 2
    append_x: bool = True
    color_normal: bool = False
    color_feature: bool = True
    init_radius: float = 0.5
    eikonal_points: int = 256
    tv_pairs: int = 16384          # sampled TV pairs per volume; 0 = all
    color_kind: str = "l1"
    index_resolution: int = 0     # 0: full-resolution index tables
    theta_lr: float = MLP_LR      # base rate of log s; decays like the MLP rate


@dataclass
class TrainState:
    adam: AdamState = field(default_factory=AdamState)
    iteration: int = 0
    stage: int = 0
    total_iters: int = 0
    logs: list = field(default_factory=list)     # (iteration, LossReport)


# ---------------------------------------------------------------- data


@dataclass
class RayPool:
    rays: Rays
    targets: np.ndarray    # (R, 3) in [0, 1]

    @classmethod
    def from_dataset(cls, ds: Dataset, views=None) -> "RayPool":
        views = range(len(ds)) if views is None else views
        parts, targets = [], []
        for i in views:
            cam, im = ds.cameras[i], ds.images[i]
            py, px = np.mgrid[0:cam.height, 0:cam.width]
            rays, hit = generate_rays(cam, px.ravel(), py.ravel())
            parts.append(rays)
            targets.append(im.reshape(-1, 3)[hit] / 255.0)
        rays = Rays(*(np.concatenate([getattr(r, k) for r in parts]) for k in
                      ("origins", "dirs", "t_near", "t_far")))
        return cls(rays, np.concatenate(targets))

    def batch(self, n: int, rng: np.random.Generator) -> tuple[Rays, np.ndarray]:
        idx = rng.integers(0, len(self.rays), size=n)
        return self.rays.subset(idx), self.targets[idx]


# ---------------------------------------------------------------- training


def build_field(plan: StagePlan, cfg: TrainConfig, rng: np.random.Generator) -> SdfField:
    first = plan.stages[0]
    hier = default_hierarchy(first.resolution, first.levels, cfg.channels, cfg.init_sigma, rng,
                             min_n=cfg.min_resolution)
    return make_field(hier, rng, cfg.hidden, cfg.layers, cfg.feature_dim, cfg.color_hidden,
                      cfg.color_layers, cfg.append_x, cfg.color_normal, cfg.color_feature,
                      cfg.init_radius)


def training_step(fld: SdfField, pool: RayPool, cfg: TrainConfig, state: TrainState,
                  rng: np.random.Generator) -> LossReport:
    rays, target = pool.batch(cfg.batch_size, rng)
    tape = Tape()
    w = cfg.weights
    picker = None
    if w.lambda_eik > 0 and cfg.eikonal_points > 0:
        def picker(boundaries: np.ndarray) -> np.ndarray:
            # half on the sampled ray points, half uniform in the domain
            m = cfg.eikonal_points
            flat = boundaries.reshape(-1, 3)
            return np.concatenate([flat[rng.integers(0, len(flat), size=m)], rng.uniform(-1.0, 1.0, size=(m, 3))])
    try:
        out = render_rays(fld, rays, tape, cfg.render, rng, with_normal=w.lambda_normal > 0, extra_points=picker)
    except FieldError as exc:
        raise TrainingDiverged(f"iteration {state.iteration}: {exc}") from exc
    comps = {"color": color_loss(out.rgb, target, cfg.color_kind)}
    if out.extra_grad is not None:
        comps["eikonal"] = eikonal_from_grad(out.extra_grad)
    if w.lambda_tv > 0:
        comps["tv"] = tv_loss(tape, fld.hierarchy.volumes, fld.sparse_levels,
                              max_pairs=cfg.tv_pairs or None, rng=rng)
    if out.normal_grad is not None:
        comps["normal"] = normal_loss(out.normal_grad)
    try:
        total, report = total_loss(comps, w, len(rays))
    except LossError as exc:
        raise TrainingDiverged(f"iteration {state.iteration}: {exc}") from exc
    T.backward(tape, total)
    state.adam.t += 1
    for p, group in parameter_groups(fld):
        adam_step(p, state.adam, make_schedule(group, state.total_iters, cfg.theta_lr).lr(state.iteration))
    return report


def run_stage(fld: SdfField, pool: RayPool, stage: Stage, state: TrainState, rng: np.random.Generator,
              cfg: TrainConfig, on_iteration: Callable | None = None) -> TrainState:
    for _ in range(stage.iters):
        report = training_step(fld, pool, cfg, state, rng)
        state.logs.append((state.iteration, report))
        if on_iteration is not None:
            on_iteration(state.iteration, report)
        state.iteration += 1
    return state


def cull_and_extend(fld: SdfField, stage: Stage, cfg: TrainConfig, rng: np.random.Generator,
                    state: TrainState | None = None) -> SparseVolume:
    """Coarse surface -> surface nodes -> rescale -> dilate -> new sparse level."""
    n_new = stage.resolution
    index_n = cfg.index_resolution if 0 < cfg.index_resolution < n_new else n_new
    sample_n = min(index_n, CULL_SAMPLE_CAP)
    grid = sample_field(lambda p: evaluate_sdf(fld, p), sample_n)
    nodes = surface_nodes(grid)
    if len(nodes) == 0:
        raise TrainingDiverged(f"no surface found at resolution {sample_n}; cannot cull")
    nodes = rescale_nodes(nodes, sample_n, index_n)
    valid = dilate(nodes, stage.dilation * (index_n - 1) / (n_new - 1))
    level = build_sparse(valid, n_new, cfg.channels, cfg.init_sigma, rng, index_n=index_n,
                         name=f"sparse{n_new}")
    old_w = fld.sdf_net.layers[0][0]
    fld.add_sparse_level(level)
    if state is not None:
        slot = state.adam.moments.get(old_w.name)
        if slot is not None:
            extra = level.channels * old_w.shape[1]
            slot[0] = np.concatenate([slot[0], np.zeros(extra)])
            slot[1] = np.concatenate([slot[1], np.zeros(extra)])
    log.info("culled %d^3 volume to %d valid nodes (%.2f%%)", n_new, len(valid),
             100.0 * len(valid) / index_n ** 3)
    return level


def train(plan: StagePlan, dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator,
          checkpoint_dir=None, on_iteration: Callable | None = None,
          fld: SdfField | None = None) -> tuple[SdfField, TrainState]:
    fld = fld if fld is not None else build_field(plan, cfg, rng)
    pool = RayPool.from_dataset(dataset)
    state = TrainState(total_iters=plan.total_iters)
    for i, stage in enumerate(plan.stages):
        state.stage = i
        if i > 0:
            cull_and_extend(fld, stage, cfg, rng, state)
        t0 = time.time()
        run_stage(fld, pool, stage, state, rng, cfg, on_iteration)
        log.info("stage %d: %d iterations in %.1fs", i, stage.iters, time.time() - t0)
        if checkpoint_dir is not None:
            save_checkpoint(fld, state, Path(checkpoint_dir) / f"stage{i + 1}.hive")
    return fld, state


# ---------------------------------------------------------------- checkpoints

MAGIC = b"HIVE"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _arr(a, dtype) -> bytes:
    a = np.ascontiguousarray(a, dtype=dtype)
    return struct.pack("<Q", a.size) + a.astype(np.dtype(dtype).newbyteorder("<")).tobytes()


def _name(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _mlp_bytes(mlp: Mlp) -> bytes:
    out = io.BytesIO()
    kinds = {"softplus": 0, "relu": 1, "none": 0, "sigmoid": 1}
    out.write(struct.pack("<III", len(mlp.layers), kinds[mlp.hidden], kinds[mlp.output]))
    for w, b in mlp.layers:
        out.write(struct.pack("<II", *w.shape))
        out.write(_name(w.name) + _arr(w.values, "<f8"))
        out.write(_name(b.name) + _arr(b.values, "<f8"))
    return out.getvalue()


def save_checkpoint(fld: SdfField, state: TrainState, path) -> None:
    grid = io.BytesIO()
    grid.write(struct.pack("<I", len(fld.hierarchy.volumes)))
    for v in fld.hierarchy.volumes:
        grid.write(struct.pack("<II", v.n, v.channels) + _name(v.features.name) + _arr(v.features.values, "<f8"))
    sparse = io.BytesIO()
    sparse.write(struct.pack("<I", len(fld.sparse_levels)))
    for s in fld.sparse_levels:
        sparse.write(struct.pack("<IIIQ", s.n, s.channels, s.index_n, s.n_valid))
        sparse.write(_name(s.embedding.name) + _arr(s.index_table, "<i4") + _arr(s.embedding.values, "<f8"))
    fb = io.BytesIO()
    fb.write(struct.pack("<BBBI", fld.append_x, fld.color_normal, fld.color_feature, fld.feature_dim))
    fb.write(_name(fld.theta.name) + _arr(fld.theta.values, "<f8"))
    fb.write(_mlp_bytes(fld.sdf_net) + _mlp_bytes(fld.color_net))
    opt = io.BytesIO()
    opt.write(struct.pack("<QQIQ", state.iteration, state.total_iters, state.stage, state.adam.t))
    opt.write(struct.pack("<I", len(state.adam.moments)))
    for name in sorted(state.adam.moments):
        m, v, step = state.adam.moments[name]
        opt.write(_name(name) + struct.pack("<Q", step) + _arr(m, "<f8") + _arr(v, "<f8"))
    data = MAGIC + struct.pack("<I", VERSION)
    data += _section(b"GRID", grid.getvalue()) + _section(b"SPRS", sparse.getvalue())
    data += _section(b"FELD", fb.getvalue()) + _section(b"OPTM", opt.getvalue())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.data)} "
                                           f"(needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, dtype) -> np.ndarray:
        (n,) = self.unpack("<Q")
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).astype(dt.newbyteorder("="))


def _read_mlp(r: _Reader) -> Mlp:
    n_layers, hidden, output = r.unpack("<III")
    layers = []
    for _ in range(n_layers):
        a, b = r.unpack("<II")
        wn = r.name()
        w = Parameter(r.array("<f8").reshape(a, b), name=wn)
        bn = r.name()
        layers.append((w, Parameter(r.array("<f8"), name=bn)))
    return Mlp(layers, "relu" if hidden else "softplus", "sigmoid" if output else "none")


def load_checkpoint(path) -> tuple[SdfField, TrainState]:
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = data[:4]
    if len(data) >= 4 and magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}; expected {MAGIC!r}")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    sections = {}
    while r.pos < len(data):
        tag = r.take(4)
        (length,) = r.unpack("<Q")
        sections[tag] = _Reader(r.take(length))
    for tag in (b"GRID", b"SPRS", b"FELD", b"OPTM"):
        if tag not in sections:
            raise TruncatedCheckpointError(f"missing section {tag.decode()}")
    g = sections[b"GRID"]
    (nv,) = g.unpack("<I")
    vols = []
    for _ in range(nv):
        n, c = g.unpack("<II")
        name = g.name()
        vols.append(FeatureVolume(n, c, Parameter(g.array("<f8").reshape(n ** 3, c), name=name)))
    s = sections[b"SPRS"]
    (ns,) = s.unpack("<I")
    levels = []
    for _ in range(ns):
        n, c, index_n, n_valid = s.unpack("<IIIQ")
        name = s.name()
        table = s.array("<i4").astype(np.int32)
        emb = Parameter(s.array("<f8").reshape(n_valid + 1, c), name=name)
        levels.append(SparseVolume(n, c, table, emb, index_n))
    f = sections[b"FELD"]
    append_x, color_normal, color_feature, feature_dim = f.unpack("<BBBI")
    theta_name = f.name()
    theta = Parameter(f.array("<f8"), name=theta_name)
    sdf_net = _read_mlp(f)
    color_net = _read_mlp(f)
    fld = SdfField(HierarchicalEncoding(vols), sdf_net, color_net, theta, levels, bool(append_x),
                   bool(color_normal), bool(color_feature), feature_dim)
    o = sections[b"OPTM"]
    iteration, total_iters, stage, t = o.unpack("<QQIQ")
    (nm,) = o.unpack("<I")
    adam = AdamState(t=t)
    for _ in range(nm):
        name = o.name()
        (step,) = o.unpack("<Q")
        m = o.array("<f8").copy()
        v = o.array("<f8").copy()
        adam.moments[name] = [m, v, step]
    return fld, TrainState(adam, iteration, stage, total_iters)
