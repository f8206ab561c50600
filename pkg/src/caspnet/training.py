"""Training loop with gradient accumulation, checkpointing and prediction helpers."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .extraction import ExtractionConfig, extract_k_trajectories, grid_to_points, trajectories_to_world
from .loss import LossConfig, total_loss
from .metrics import miss_per_step
from .network import CaspNet, CaspNetConfig
from .raster import Frame, KernelParams, RasterConfig, SCENE_CLASSES, TARGET_CLASSES, build_sample
from .scene import Scene
from .tensor import Adam, Tape
from .tensor import checkpoint as ckpt

log = logging.getLogger(__name__)

MODES = {"scene": SCENE_CLASSES, "single_target": TARGET_CLASSES}
LOG_COLUMNS = ("step", "L_class", "L_offset", "total")


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    max_steps: int = 1000
    seed: int = 0
    save_interval: int = 100
    augment: bool = True
    mode: str = "scene"
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over max_steps

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 0 or self.save_interval < 1:
            raise ValueError("batch_size and save_interval must be >= 1, max_steps >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, step: int) -> float:
        """Learning rate for the update that follows ``step`` completed steps."""
        if self.lr_schedule == "constant" or self.max_steps == 0:
            return self.lr
        return self.lr * 0.5 * (1 + math.cos(math.pi * min(step, self.max_steps) / self.max_steps))

    @classmethod
    def from_mapping(cls, kv: dict) -> "TrainConfig":
        out = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            v = kv[f.name]
            if f.type in ("bool", bool):
                out[f.name] = str(v).strip().lower() in ("1", "true", "yes", "on")
            elif f.type in ("int", int):
                out[f.name] = int(v)
            elif f.type in ("float", float):
                out[f.name] = float(v)
            else:
                out[f.name] = str(v)
        return cls(**out)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def raster_config_for(cfg: CaspNetConfig) -> RasterConfig:
    anchor_u = min(122, cfg.U - 1) if cfg.U == 152 else int(round(cfg.U * 122 / 152))
    return RasterConfig(U=cfg.U, V=cfg.V, anchor_u=anchor_u, anchor_v=cfg.V // 2, M=cfg.M, N=cfg.N)


class Trainer:
    """Adam over gradient-accumulated mini-batches; one optimizer step per ``step()`` call."""

    def __init__(self, net: CaspNet, scenes: list[Scene], tcfg: TrainConfig, kp: KernelParams | None = None,
                 loss_cfg: LossConfig = LossConfig(), out_dir=None):
        if not scenes:
            raise ValueError("training needs at least one scene")
        if tuple(net.cfg.classes) != MODES[tcfg.mode]:
            raise ValueError(f"model classes {net.cfg.classes} do not match mode {tcfg.mode!r}")
        self.net = net
        self.scenes = scenes
        self.tcfg = tcfg
        self.rc = raster_config_for(net.cfg)
        self.kp = kp or KernelParams.default(net.cfg.N)
        self.loss_cfg = loss_cfg
        self.opt = Adam(net.parameters(trainable_only=True), lr=tcfg.lr)
        self.step_count = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._cache: dict[int, object] = {}

    def sample(self, idx: int, rng: np.random.Generator | None):
        if rng is None:
            if idx not in self._cache:
                self._cache[idx] = build_sample(self.scenes[idx], self.rc, self.kp, self.net.cfg.classes)
            return self._cache[idx]
        return build_sample(self.scenes[idx], self.rc, self.kp, self.net.cfg.classes, rng)

    def batch_indices(self, rng: np.random.Generator) -> np.ndarray:
        n, b = len(self.scenes), self.tcfg.batch_size
        return rng.permutation(n)[:b] if b <= n else rng.integers(0, n, size=b)

    def step(self) -> dict:
        """One optimizer update; the step's randomness depends only on (seed, step)."""
        rng = np.random.default_rng([self.tcfg.seed, self.step_count])
        idx = self.batch_indices(rng)
        b = len(idx)
        self.net.zero_grad()
        sums = np.zeros(3)
        for i in idx:
            s = self.sample(int(i), rng if self.tcfg.augment else None)
            with Tape() as tape:
                out = self.net(s.inputs, s.map_image, training=True)
                tot, lc, lo = total_loss(out.classes, out.offsets, s.target, s.counts, self.net.cfg.classes,
                                         self.loss_cfg)
            tape.backward(tot, np.full_like(tot.data, 1.0 / b))
            sums += (lc.item(), lo.item(), tot.item())
        self.opt.lr = self.tcfg.lr_at(self.step_count)
        self.opt.step()
        self.step_count += 1
        n = self.net.cfg.N
        row = {"step": self.step_count, "L_class": sums[0] / b / n, "L_offset": sums[1] / b / n, "total": sums[2] / b}
        return row

    # -- persistence
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.net.state_dict().items()}
        out.update(self.opt.state_tensors())
        out["train/step"] = np.array([self.step_count], dtype=np.float64)
        return out

    def save(self, path) -> None:
        ckpt.save(path, self.state_tensors())

    def load(self, path) -> None:
        tensors = ckpt.load(path)
        load_model_tensors(self.net, tensors)
        self.opt.load_state_tensors(tensors)
        self.step_count = int(tensors["train/step"][0])

    def run(self, max_steps: int | None = None, log_path=None) -> list[dict]:
        """Train until ``max_steps`` total steps, appending rows to the CSV log and saving checkpoints."""
        max_steps = self.tcfg.max_steps if max_steps is None else max_steps
        rows = []
        writer = fh = None
        if log_path is not None:
            log_path = Path(log_path)
            new = not log_path.exists() or self.step_count == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(LOG_COLUMNS)
        try:
            while self.step_count < max_steps:
                row = self.step()
                rows.append(row)
                if writer:
                    writer.writerow([row["step"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
                    fh.flush()
                log.info("step %d total %.5f", row["step"], row["total"])
                if self.out_dir is not None and (self.step_count % self.tcfg.save_interval == 0
                                                 or self.step_count == max_steps):
                    self.save(self.out_dir / f"ckpt_{self.step_count:06d}.caspckpt")
                    self.save(self.out_dir / "last.caspckpt")
        finally:
            if fh:
                fh.close()
        return rows


def load_model_tensors(net: CaspNet, tensors: dict[str, np.ndarray]) -> None:
    model = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    net.load_state_dict(model)


# ---------------------------------------------------------------- inference helpers

def predict_scene(net: CaspNet, scene: Scene) -> tuple[np.ndarray, Frame]:
    """Eval-mode forward pass; returns the (N, |C|+2, U, V) grid stack and the scene's frame."""
    rc = raster_config_for(net.cfg)
    s = build_sample(scene, rc, KernelParams.default(net.cfg.N), net.cfg.classes)
    with T.no_tape():
        out = net(s.inputs, s.map_image, training=False)
    return out.as_array(), s.frame


def agent_class(kind: str, classes) -> int | None:
    return classes.index(kind) if kind in classes else None


def future_track(scene: Scene, agent, t0: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """World positions for steps t0+1..t0+n and a mask of which exist."""
    pos = np.zeros((n, 2))
    ok = np.zeros(n, dtype=bool)
    for i in range(n):
        p = agent.at(t0 + 1 + i)
        if p is not None:
            pos[i] = (p.x, p.y)
            ok[i] = True
    return pos, ok


def roi_mask(uv: np.ndarray, rc: RasterConfig) -> np.ndarray:
    return (uv[:, 0] >= -0.5) & (uv[:, 0] < rc.U - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < rc.V - 0.5)


def scene_track_misses(pred: np.ndarray, scene: Scene, frame: Frame, rc: RasterConfig, classes,
                       threshold: float = 0.05, radius: float = 2.0) -> list[tuple[str, bool]]:
    """Per-agent track misses using every super-threshold point of the agent's class channel."""
    t0 = scene.current_step(rc.M)
    nc = len(classes)
    points = {}
    out = []
    for a in scene.agents:
        c = agent_class(a.kind, classes)
        if c is None:
            continue
        world, ok = future_track(scene, a, t0, rc.N)
        uv = frame.to_grid(world)
        mask = ok & roi_mask(uv, rc)
        if not mask.any():
            continue
        gt = uv * rc.resolution
        missed = False
        for t in np.nonzero(mask)[0]:
            key = (int(t), c)
            if key not in points:
                points[key] = grid_to_points(pred[t, c], pred[t, nc:nc + 2], threshold, int(t), rc.resolution).pos
            missed |= miss_per_step(gt[t], points[key], radius)
        out.append((a.id, bool(missed)))
    return out


def target_state(scene: Scene, frame: Frame, t0: int) -> tuple[np.ndarray, np.ndarray]:
    """Target position (grid-frame meters) and velocity along the grid axes at t0."""
    st = scene.target.at(t0)
    pos = frame.to_grid(np.array([st.x, st.y])) * frame.resolution
    vel = frame.rotate(np.array([st.vx, st.vy]))
    return pos, vel


def target_modes(pred: np.ndarray, scene: Scene, frame: Frame, k: int = 10, dt: float = 0.5,
                 cfg: ExtractionConfig = ExtractionConfig(), m_steps: int = 3):
    """Extracted target trajectories (grid frame) from the target channel of a prediction."""
    t0 = scene.current_step(m_steps)
    nc = pred.shape[1] - 2
    pos, vel = target_state(scene, frame, t0)
    return extract_k_trajectories(pred[:, 0], pred[:, nc:nc + 2], pos, vel, k, dt, cfg, frame.resolution)


def target_modes_world(pred, scene, frame, k=10, dt=0.5, cfg=ExtractionConfig(), m_steps=3) -> list[np.ndarray]:
    return trajectories_to_world(target_modes(pred, scene, frame, k, dt, cfg, m_steps), frame)
