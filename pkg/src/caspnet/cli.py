"""Command-line entry point: ``caspnet <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import gridio
from .extraction import (ExtractedTrajectory, ExtractionConfig, grid_to_points, trajectories_from_json,
                         trajectories_to_json, trajectories_to_world)
from .metrics import MetricsAccumulator, constant_velocity_baseline
from .network import CaspNet, CaspNetConfig, parse_kv
from .raster import RasterConfig, rasterize_map, scene_frame
from .scene import load_scene
from .render import write_renders
from .scenegen import SCENARIO_KINDS, generate_dataset, read_manifest
from .tensor import checkpoint as ckpt
from .training import (MODES, TrainConfig, Trainer, future_track, load_model_tensors, predict_scene,
                       raster_config_for, roi_mask, target_modes, target_state)

EXIT_USAGE = 2
EXIT_CONFIG = 3
MODEL_CFG = "model.cfg"

log = logging.getLogger("caspnet")


class UsageError(Exception):
    """Bad input paths or arguments (exit 2)."""


class ConfigError(Exception):
    """Inconsistent configuration or tensor shapes (exit 3)."""


def _seed_override(seed: int) -> int:
    env = os.environ.get("CASP_SEED")
    if env is None:
        return seed
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"CASP_SEED must be an integer, got {env!r}")


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"cannot write to {p}: {e.strerror or e}")
    return p


def _scene_paths(path) -> list[Path]:
    p = _need(path, "scene input")
    if p.is_dir():
        p = _need(p / "manifest.json", "manifest")
    if p.suffix == ".json" and p.name.startswith("manifest"):
        return read_manifest(p)
    return [p]


def _load_scenes(paths):
    try:
        return [load_scene(p) for p in paths]
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise UsageError(f"invalid scene file: {e}")


# ---------------------------------------------------------------- config files

def read_run_config(path, mode: str | None = None) -> tuple[CaspNetConfig, TrainConfig]:
    kv = {}
    if path is not None:
        try:
            kv = parse_kv(_need(path, "config file").read_text())
        except ValueError as e:
            raise ConfigError(f"config file: {e}")
    known = {f for f in CaspNetConfig.__dataclass_fields__} | {f for f in TrainConfig.__dataclass_fields__}
    unknown = sorted(set(kv) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if mode is not None:
        kv["mode"] = mode
    try:
        tcfg = TrainConfig.from_mapping(kv)
        if "classes" not in kv:
            kv["classes"] = ",".join(MODES[tcfg.mode])
        mcfg = CaspNetConfig.from_mapping(kv)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e))
    if tuple(mcfg.classes) != MODES[tcfg.mode]:
        raise ConfigError(f"classes {mcfg.classes} inconsistent with mode {tcfg.mode!r}")
    return mcfg, tcfg


def load_model(ckpt_path) -> CaspNet:
    p = _need(ckpt_path, "checkpoint")
    cfg_path = _need(p.parent / MODEL_CFG, "model config beside checkpoint")
    try:
        cfg = CaspNetConfig.from_mapping(parse_kv(cfg_path.read_text()))
    except ValueError as e:
        raise ConfigError(f"{cfg_path}: {e}")
    net = CaspNet(cfg)
    try:
        load_model_tensors(net, ckpt.load(p))
    except (KeyError, ValueError) as e:
        raise ConfigError(f"checkpoint does not match model config: {e}")
    return net


# ---------------------------------------------------------------- commands

def cmd_scenegen(args) -> int:
    out = _out_dir(args.out)
    kinds = [k.strip() for k in args.kinds.split(",")] if args.kinds else list(SCENARIO_KINDS)
    bad = [k for k in kinds if k not in SCENARIO_KINDS]
    if bad:
        raise UsageError(f"unknown scenario kind(s) {', '.join(bad)}; choose from {', '.join(SCENARIO_KINDS)}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    manifest = generate_dataset(out, args.count, kinds, _seed_override(args.seed))
    print(manifest)
    return 0


def cmd_train(args) -> int:
    mcfg, tcfg = read_run_config(args.config, args.mode)
    over = {k: getattr(args, k) for k in ("batch_size", "lr", "max_steps", "save_interval") if getattr(args, k) is not None}
    seed = _seed_override(args.seed if args.seed is not None else tcfg.seed)
    try:
        tcfg = TrainConfig(**{**tcfg.__dict__, **over, "seed": seed,
                              "augment": tcfg.augment and not args.no_augment})
        mcfg = CaspNetConfig(**{**mcfg.__dict__, "seed": seed})
    except ValueError as e:
        raise ConfigError(str(e))
    scenes = _load_scenes(_scene_paths(args.data))
    out = _out_dir(args.out)
    rc = raster_config_for(mcfg)
    net = CaspNet(mcfg)
    try:
        trainer = Trainer(net, scenes, tcfg, out_dir=out)
    except ValueError as e:
        raise ConfigError(str(e))
    for s in scenes:
        if s.anchor() is None or len(s.anchor().track) < rc.M:
            raise ConfigError("scene too short for the configured input steps")
    (out / MODEL_CFG).write_text(mcfg.to_text())
    (out / "train.cfg").write_text(tcfg.to_text())
    if args.resume:
        try:
            trainer.load(_need(args.resume, "resume checkpoint"))
        except (KeyError, ValueError) as e:
            raise ConfigError(f"cannot resume: {e}")
    trainer.run(tcfg.max_steps, out / "train_log.csv")
    print(out / "last.caspckpt")
    return 0


def cmd_predict(args) -> int:
    net = load_model(args.ckpt)
    if args.mode is not None and tuple(net.cfg.classes) != MODES[args.mode]:
        raise ConfigError(f"checkpoint was trained with classes {net.cfg.classes}, not mode {args.mode!r}")
    paths = _scene_paths(args.scene)
    scenes = _load_scenes(paths)
    out = _out_dir(args.out)
    for p, sc in zip(paths, scenes):
        if net.cfg.classes == MODES["single_target"] and sc.target is None:
            raise ConfigError(f"{p}: single-target prediction needs a target agent")
        try:
            pred, _ = predict_scene(net, sc)
        except ValueError as e:
            raise ConfigError(f"{p}: {e}")
        dest = out / (p.stem + ".caspgrid")
        gridio.save_grid(dest, pred)
        print(dest)
    return 0


def _load_grid(path) -> np.ndarray:
    try:
        return gridio.load_grid(_need(path, "grid dump"))
    except ValueError as e:
        raise UsageError(f"{path}: {e}")


def cmd_extract(args) -> int:
    if args.k not in (1, 5, 10):
        warnings.warn(f"K={args.k} is outside the evaluated set {{1, 5, 10}}; proceeding", UserWarning)
    grids = _load_grid(args.grids)
    scene = _load_scenes([_need(args.scene, "scene")])[0]
    if scene.target is None:
        raise UsageError("scene has no target agent to extract trajectories for")
    if grids.ndim != 4 or grids.shape[1] < 3:
        raise ConfigError(f"grid dump has shape {grids.shape}, expected (N, |C|+2, U, V)")
    rc = raster_config_for(CaspNetConfig(U=grids.shape[2], V=grids.shape[3], N=grids.shape[0],
                                         pyramid_levels=1, channels=(1,)))
    frame = scene_frame(scene, scene.current_step(rc.M), rc)
    try:
        cfg = ExtractionConfig(threshold=args.threshold)
    except ValueError as e:
        raise UsageError(str(e))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        trajs = target_modes(grids, scene, frame, args.k, scene.dt, cfg, rc.M)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(trajectories_to_json(trajs, frame, scene.dt))
    print(args.out)
    return 0


def cmd_baseline(args) -> int:
    scene = _load_scenes([_need(args.scene, "scene")])[0]
    if scene.target is None:
        raise UsageError("scene has no target agent")
    rc = RasterConfig(N=args.steps)
    t0 = scene.current_step(rc.M)
    frame = scene_frame(scene, t0, rc)
    pos, vel = target_state(scene, frame, t0)
    traj = constant_velocity_baseline(pos, vel, args.steps, scene.dt)
    Path(args.out).write_text(trajectories_to_json([ExtractedTrajectory(traj, 1.0, "cv")], frame, scene.dt))
    print(args.out)
    return 0


def _pair_inputs(preds, gts):
    if len(preds) != len(gts):
        raise UsageError("--pred and --gt need the same number of entries")
    return list(zip(preds, gts))


def cmd_eval(args) -> int:
    pairs = _pair_inputs(args.pred, args.gt)
    map_scene = _load_scenes([_need(args.map, "map scene")])[0] if args.map else None
    acc = None
    ks = tuple(sorted(set(args.k)))
    for pred_path, gt_path in pairs:
        scene = _load_scenes([_need(gt_path, "ground-truth scene")])[0]
        polys = (map_scene or scene).map.drivable
        pp = _need(pred_path, "prediction")
        if pp.suffix == ".json":
            try:
                trajs, frame, _ = trajectories_from_json(pp.read_text())
            except (ValueError, KeyError, json.JSONDecodeError) as e:
                raise UsageError(f"{pp}: {e}")
            n = len(trajs[0].points) if trajs else args.steps
            if any(len(t.points) != n for t in trajs):
                raise ConfigError(f"{pp}: modes have different step counts")
            if scene.target is None:
                raise UsageError(f"{gt_path}: no target agent")
            acc = acc or MetricsAccumulator(n, ks, args.radius)
            if acc.n != n:
                raise ConfigError(f"{pp}: {n} steps but earlier predictions had {acc.n}")
            t0 = scene.current_step(RasterConfig().M)
            world, ok = future_track(scene, scene.target, t0, n)
            if not ok.all():
                raise ConfigError(f"{gt_path}: target track has fewer than {n} future steps")
            modes = trajectories_to_world(trajs, frame)
            per_step = [np.array([m[t] for m in modes]).reshape(-1, 2) for t in range(n)]
            rc = raster_config_for(CaspNetConfig(N=n, pyramid_levels=1, channels=(1,)))
            in_roi = roi_mask(frame.to_grid(world), rc)
            acc.add_track(world, per_step, in_roi)
            acc.add_modes(world, modes, polys)
        else:
            grids = _load_grid(pp)
            n = grids.shape[0]
            acc = acc or MetricsAccumulator(n, ks, args.radius)
            if acc.n != n:
                raise ConfigError(f"{pp}: {n} steps but earlier predictions had {acc.n}")
            nc = grids.shape[1] - 2
            classes = ("target",) if nc == 1 else ("target", "vehicle", "pedestrian")
            rc = raster_config_for(CaspNetConfig(U=grids.shape[2], V=grids.shape[3], N=n, pyramid_levels=1,
                                                 channels=(1,), classes=classes))
            frame = scene_frame(scene, scene.current_step(rc.M), rc)
            for a in scene.agents:
                if a.kind not in classes:
                    continue
                world, ok = future_track(scene, a, scene.current_step(rc.M), n)
                uv = frame.to_grid(world)
                mask = ok & roi_mask(uv, rc)
                c = classes.index(a.kind)
                per_step = [grid_to_points(grids[t, c], grids[t, nc:], args.threshold, t).pos for t in range(n)]
                acc.add_track(uv * rc.resolution, per_step, mask)
    if acc is None:
        raise UsageError("nothing to evaluate")
    rep = acc.report()
    out = _out_dir(args.out)
    (out / "metrics.json").write_text(rep.to_json())
    (out / "metrics.csv").write_text(rep.to_csv())
    print(rep.to_json())
    return 0


def cmd_render(args) -> int:
    grids = _load_grid(args.grids)
    if grids.ndim != 4 or grids.shape[1] < 3:
        raise ConfigError(f"grid dump has shape {grids.shape}, expected (N, |C|+2, U, V)")
    image = None
    if args.scene:
        scene = _load_scenes([_need(args.scene, "scene")])[0]
        rc = raster_config_for(CaspNetConfig(U=grids.shape[2], V=grids.shape[3], N=grids.shape[0],
                                             pyramid_levels=1, channels=(1,)))
        image = rasterize_map(scene.map, rc, scene_frame(scene, scene.current_step(rc.M), rc))
    for p in write_renders(grids, _out_dir(args.out), image):
        print(p)
    return 0


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="caspnet", description="Grid-based multi-agent motion prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("scenegen", help="generate synthetic scenes and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--kinds", default=None, help=f"comma list from {','.join(SCENARIO_KINDS)}")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_scenegen)

    s = sub.add_parser("train", help="train a model on a scene manifest")
    s.add_argument("--data", required=True, help="manifest, scene directory or single scene")
    s.add_argument("--config", default=None, help="key-value config file")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=sorted(MODES), default=None)
    s.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    s.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--save-interval", dest="save_interval", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="write predicted grid dumps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True, help="scene file, scene directory or manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=sorted(MODES), default=None)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("extract", help="extract K target trajectories from a grid dump")
    s.add_argument("--grids", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--threshold", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("baseline", help="constant-velocity trajectory for the target")
    s.add_argument("--scene", required=True)
    s.add_argument("--steps", type=int, default=12)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("eval", help="compute metrics for predictions against scenes")
    s.add_argument("--pred", nargs="+", required=True, help="trajectory JSON files or grid dumps")
    s.add_argument("--gt", nargs="+", required=True, help="ground-truth scene files, paired with --pred")
    s.add_argument("--map", default=None, help="scene whose drivable area is used for the off-road rate")
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    s.add_argument("--threshold", type=float, default=0.05)
    s.add_argument("--radius", type=float, default=2.0)
    s.add_argument("--steps", type=int, default=12)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="render grid dumps to PPM heatmaps")
    s.add_argument("--grids", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scene", default=None, help="scene whose map is drawn underneath")
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
