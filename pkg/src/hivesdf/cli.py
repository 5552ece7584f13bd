"""Command-line entry point: synth, train, mesh, eval, verify."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("hivesdf")


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config

# key -> (type, default). Order here is the order of the resolved dump.
SCHEMA: dict[str, tuple[type, object]] = {
    "scene.dataset": (str, ""),
    "volumes.channels": (int, 4),
    "volumes.min_resolution": (int, 2),
    "volumes.levels": (int, 6),
    "volumes.init_sigma": (float, 0.02),
    "volumes.index_resolution": (int, 0),
    "network.hidden": (int, 32),
    "network.layers": (int, 2),
    "network.feature_dim": (int, 16),
    "network.color_hidden": (int, 32),
    "network.color_layers": (int, 2),
    "network.color_normal": (bool, False),
    "network.init_radius": (float, 0.5),
    "training.stages": (str, "dense:64:3000, sparse:128:1000, sparse:256:2000"),
    "training.batch_size": (int, 512),
    "training.lambda_eik": (float, 0.1),
    "training.lambda_tv": (float, 0.01),
    "training.lambda_normal": (float, 0.001),
    "training.theta_lr": (float, 2e-3),
    "training.seed": (int, 0),
    "training.threads": (int, os.cpu_count() or 1),
    "training.eikonal_points": (int, 256),
    "training.tv_pairs": (int, 16384),
    "training.dilation": (float, 3.0),
    "training.color_loss": (str, "l1"),
    "render.samples": (int, 32),
    "render.background": (str, "1.0 1.0 1.0"),
    "render.normal_rays": (int, 128),
    "render.normal_sections": (int, 4),
    "render.midpoint_features": (str, "blend"),
    "render.grad_step": (float, 1e-3),
    "output.dir": (str, "run"),
    "output.log_every": (int, 100),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(key: str, text: str):
    kind = SCHEMA[key][0]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def defaults() -> dict:
    return {k: v for k, (_, v) in SCHEMA.items()}


def apply_line(cfg: dict, line: str, where: str = "") -> None:
    body = line.split("#", 1)[0].strip()
    if not body:
        return
    if "=" not in body:
        raise ConfigError(f"{where}expected 'section.key = value', got {line.strip()!r}")
    key, value = (s.strip() for s in body.split("=", 1))
    if key not in SCHEMA:
        raise ConfigError(f"{where}unknown key {key!r}")
    cfg[key] = _convert(key, value)


def parse_config(text: str, base: dict | None = None) -> dict:
    cfg = dict(base) if base is not None else defaults()
    for i, line in enumerate(text.splitlines(), 1):
        apply_line(cfg, line, f"line {i}: ")
    validate(cfg)
    return cfg


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: dict) -> str:
    lines, section = [], None
    for key in SCHEMA:
        sec = key.split(".", 1)[0]
        if sec != section:
            if section is not None:
                lines.append("")
            lines.append(f"# {sec}")
            section = sec
        lines.append(f"{key} = {_format(cfg[key])}")
    return "\n".join(lines) + "\n"


def parse_stages(text: str):
    from .optimize import Stage, StagePlan

    stages = []
    for item in (s.strip() for s in text.split(",")):
        if not item:
            continue
        bits = item.split(":")
        if len(bits) != 3:
            raise ConfigError(f"training.stages: expected kind:resolution:iters, got {item!r}")
        try:
            kind, res, iters = bits[0].strip(), int(bits[1]), int(bits[2])
        except ValueError:
            raise ConfigError(f"training.stages: bad number in {item!r}") from None
        stages.append((kind, res, iters))
    try:
        return StagePlan([Stage(iters, kind, res) for kind, res, iters in stages])
    except ValueError as exc:
        raise ConfigError(f"training.stages: {exc}") from None


def _background(cfg: dict) -> tuple:
    try:
        bg = tuple(float(v) for v in cfg["render.background"].split())
    except ValueError:
        raise ConfigError("render.background: expected three numbers") from None
    if len(bg) != 3 or not all(0.0 <= v <= 1.0 for v in bg):
        raise ConfigError("render.background: expected three numbers in [0, 1]")
    return bg


def validate(cfg: dict) -> None:
    positive = ["volumes.channels", "volumes.levels", "network.hidden", "network.layers",
                "network.color_hidden", "network.color_layers", "training.batch_size",
                "training.threads", "render.samples", "output.log_every"]
    for key in positive:
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1, got {cfg[key]}")
    for key in ("volumes.init_sigma", "training.lambda_eik", "training.lambda_tv", "training.lambda_normal",
                "training.theta_lr",
                "training.eikonal_points", "training.tv_pairs", "volumes.index_resolution",
                "render.normal_rays", "network.feature_dim"):
        if not cfg[key] >= 0:
            raise ConfigError(f"{key} must be >= 0, got {cfg[key]}")
    if cfg["volumes.min_resolution"] < 2:
        raise ConfigError("volumes.min_resolution must be >= 2")
    if cfg["training.dilation"] <= 0 or cfg["render.grad_step"] <= 0:
        raise ConfigError("training.dilation and render.grad_step must be positive")
    if cfg["training.color_loss"] not in ("l1", "l2"):
        raise ConfigError("training.color_loss must be l1 or l2")
    if cfg["render.midpoint_features"] not in ("blend", "eval"):
        raise ConfigError("render.midpoint_features must be blend or eval")
    _background(cfg)
    parse_stages(cfg["training.stages"])


def build_training(cfg: dict):
    """(StagePlan, TrainConfig) from a validated config dict."""
    from .loss import LossWeights
    from .optimize import TrainConfig
    from .render import RenderConfig

    plan = parse_stages(cfg["training.stages"])
    plan.stages[0].levels = cfg["volumes.levels"]
    for st in plan.stages:
        st.dilation = cfg["training.dilation"]
    rcfg = RenderConfig(n_samples=cfg["render.samples"], background=_background(cfg),
                        grad_step=cfg["render.grad_step"], normal_step=cfg["render.grad_step"],
                        normal_rays=cfg["render.normal_rays"], normal_sections=cfg["render.normal_sections"],
                        midpoint_features=cfg["render.midpoint_features"])
    tcfg = TrainConfig(
        batch_size=cfg["training.batch_size"],
        weights=LossWeights(cfg["training.lambda_eik"], cfg["training.lambda_tv"], cfg["training.lambda_normal"]),
        render=rcfg,
        channels=cfg["volumes.channels"],
        min_resolution=cfg["volumes.min_resolution"],
        init_sigma=cfg["volumes.init_sigma"],
        hidden=cfg["network.hidden"],
        layers=cfg["network.layers"],
        feature_dim=cfg["network.feature_dim"],
        color_hidden=cfg["network.color_hidden"],
        color_layers=cfg["network.color_layers"],
        color_normal=cfg["network.color_normal"],
        init_radius=cfg["network.init_radius"],
        eikonal_points=cfg["training.eikonal_points"],
        tv_pairs=cfg["training.tv_pairs"],
        color_kind=cfg["training.color_loss"],
        index_resolution=cfg["volumes.index_resolution"],
        theta_lr=cfg["training.theta_lr"],
    )
    return plan, tcfg


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .scene import make_shape, synth_dataset

    if args.views < 1 or args.size < 1:
        raise UsageError("--views and --size must be >= 1")
    shape = make_shape(args.shape)
    try:
        synth_dataset(shape, args.views, args.size, args.size, args.seed, args.out, shape_name=args.shape)
    except OSError as exc:
        print(f"error: cannot write dataset to {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(Path(args.out) / "manifest.txt")
    return EXIT_OK


def cmd_train(args) -> int:
    from .optimize import TrainingDiverged, train
    from .scene import DatasetError, load_dataset

    cfg = defaults()
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config(path.read_text())
    for item in args.set or []:
        apply_line(cfg, item, "--set: ")
    if args.dataset is not None:
        cfg["scene.dataset"] = args.dataset
    if args.out is not None:
        cfg["output.dir"] = args.out
    if args.iters is not None:
        if args.iters < 0:
            raise UsageError("--iters must be >= 0")
        plan = parse_stages(cfg["training.stages"])
        cfg["training.stages"] = ", ".join(f"{s.kind}:{s.resolution}:{args.iters}" for s in plan.stages)
    validate(cfg)
    if not cfg["scene.dataset"]:
        raise ConfigError("no dataset given (scene.dataset or --dataset)")
    ds_dir = Path(cfg["scene.dataset"])
    if not ds_dir.is_dir():
        raise ConfigError(f"dataset directory not found: {ds_dir}")
    try:
        dataset = load_dataset(ds_dir)
    except DatasetError as exc:
        raise ConfigError(f"dataset {ds_dir}: {exc}") from None

    plan, tcfg = build_training(cfg)
    # training.threads is recorded for the dump; every kernel is serial, which
    # also keeps runs bit-reproducible
    out = Path(cfg["output.dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.cfg").write_text(dump_config(cfg))
        loss_log = open(out / "loss.tsv", "w")
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_IO

    every = cfg["output.log_every"]
    t0 = time.time()

    def on_iteration(it, report):
        loss_log.write(report.tsv(it) + "\n")
        if it % every == 0:
            log.info("iter %d  color %.5f  eik %.5f  tv %.5f  normal %.5f  total %.5f  (%.0fs)", it,
                     report.color, report.eikonal, report.tv, report.normal, report.total, time.time() - t0)

    with loss_log:
        loss_log.write("iter\tcolor\teikonal\ttv\tnormal\ttotal\n")
        try:
            train(plan, dataset, tcfg, np.random.default_rng(cfg["training.seed"]), out, on_iteration)
        except TrainingDiverged as exc:
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
    print(f"trained {plan.total_iters} iterations in {time.time() - t0:.1f}s; outputs in {out}")
    return EXIT_OK


def _load(path):
    from .optimize import CheckpointError, load_checkpoint

    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    try:
        return load_checkpoint(p)[0]
    except CheckpointError as exc:
        raise ConfigError(f"bad checkpoint {p}: {exc}") from None


def cmd_mesh(args) -> int:
    from .field import evaluate_sdf
    from .surface import marching_cubes, sample_field, write_obj

    if args.res < 2:
        raise UsageError(f"--res must be >= 2, got {args.res}")
    fld = _load(args.checkpoint)
    mesh = marching_cubes(sample_field(lambda p: evaluate_sdf(fld, p), args.res))
    try:
        write_obj(mesh, args.out)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{args.out}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import metrics as M
    from .scene import SHAPES, make_shape
    from .surface import read_obj

    def read(path):
        if not Path(path).is_file():
            raise ConfigError(f"mesh not found: {path}")
        try:
            return read_obj(path)
        except ValueError as exc:
            raise ConfigError(f"bad mesh {path}: {exc}") from None

    mesh = read(args.mesh)
    if mesh.is_empty:
        raise ConfigError(f"mesh {args.mesh} is empty")
    pred, _ = M.sample_mesh(mesh, args.samples, np.random.default_rng(args.seed))
    if args.gt in SHAPES:
        shape = make_shape(args.gt)
        gt_mesh = M.ground_truth_mesh(shape, args.gt_res)
        gt = M.ground_truth_samples(shape, args.samples, np.random.default_rng(args.seed), gt_mesh)
    else:
        gt_mesh = read(args.gt)
        if gt_mesh.is_empty:
            raise ConfigError(f"mesh {args.gt} is empty")
        gt, _ = M.sample_mesh(gt_mesh, args.samples, np.random.default_rng(args.seed))
    report = M.chamfer_l1(pred, gt)
    values = dict(report.as_dict())
    values["normal_consistency"] = M.normal_consistency(mesh, gt_mesh, args.samples,
                                                        np.random.default_rng(args.seed))
    if args.dataset is not None:
        if args.checkpoint is None:
            raise UsageError("--dataset needs --checkpoint for PSNR")
        values["psnr"] = _psnr(args)
    print(M.write_report(values), end="")
    return EXIT_OK


def _psnr(args) -> float:
    from .metrics import psnr
    from .render import RenderConfig, render_image
    from .scene import DatasetError, load_dataset

    fld = _load(args.checkpoint)
    try:
        ds = load_dataset(args.dataset)
    except DatasetError as exc:
        raise ConfigError(f"dataset {args.dataset}: {exc}") from None
    rcfg = RenderConfig(n_samples=args.render_samples, stratified=False, background=ds.background)
    views = range(len(ds)) if args.views is None else range(min(args.views, len(ds)))
    scores = [psnr(render_image(fld, ds.cameras[i], rcfg), ds.images[i] / 255.0) for i in views]
    return float(np.mean(scores))


def cmd_verify(args) -> int:
    import contextlib

    from .verify import perturbed_vjp, run_battery

    with contextlib.ExitStack() as stack:
        if args.perturb_vjp:
            name, _, factor = args.perturb_vjp.partition(":")
            try:
                stack.enter_context(perturbed_vjp(name, float(factor) if factor else 1.01))
            except (KeyError, ValueError) as exc:
                raise UsageError(f"--perturb-vjp: {exc.args[0]}") from None
        results, elapsed = run_battery(args.seed, args.points)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {elapsed:.1f}s (seed {args.seed})")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .scene import SHAPES

    ap = argparse.ArgumentParser(prog="hivesdf", description="Hierarchical sparse-volume SDF reconstruction.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic multi-view dataset")
    p.add_argument("--shape", required=True, choices=sorted(SHAPES))
    p.add_argument("--views", type=int, default=24)
    p.add_argument("--size", type=int, default=64, help="image width and height")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the staged optimisation")
    p.add_argument("--config", help="flat 'section.key = value' file")
    p.add_argument("--dataset", help="dataset directory (overrides scene.dataset)")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--iters", type=int, help="iterations for every stage")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--res", type=int, default=128, help="grid nodes per axis")
    p.add_argument("--out", default="mesh.obj")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="chamfer, normal consistency and PSNR")
    p.add_argument("mesh")
    p.add_argument("--gt", required=True, help=f"shape name ({', '.join(sorted(SHAPES))}) or OBJ path")
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--gt-res", type=int, default=256, help="marching-cubes resolution for analytic shapes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", help="dataset for PSNR (needs --checkpoint)")
    p.add_argument("--checkpoint")
    p.add_argument("--views", type=int, help="only the first N views for PSNR")
    p.add_argument("--render-samples", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the invariant battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--perturb-vjp", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:         # bad arguments caught by library validation
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
