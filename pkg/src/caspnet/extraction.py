"""Turn predicted occupancy grids of one target into K parametric trajectories."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .raster import Frame


@dataclass(frozen=True)
class OccupiedPoint:
    t: int
    pos: tuple[float, float]     # grid-frame meters
    prob: float


@dataclass
class PointSet:
    """Occupied points of one step as parallel arrays, ordered by (prob desc, u asc, v asc)."""

    t: int
    pos: np.ndarray              # (n, 2) grid-frame meters
    prob: np.ndarray             # (n,)
    pix: np.ndarray = field(default=None)   # (n, 2) integer pixel, used for tie-breaking

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(-1, 2)
        self.prob = np.asarray(self.prob, dtype=np.float64).reshape(-1)
        if self.pix is None:
            self.pix = np.floor(self.pos + 0.5).astype(np.int64)

    def __len__(self):
        return len(self.prob)

    def __iter__(self):
        for p, q in zip(self.pos, self.prob):
            yield OccupiedPoint(self.t, (float(p[0]), float(p[1])), float(q))

    def take(self, idx) -> "PointSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PointSet(self.t, self.pos[idx], self.prob[idx], self.pix[idx])

    def sorted(self) -> "PointSet":
        order = np.lexsort((self.pix[:, 1], self.pix[:, 0], -self.prob))
        return self.take(order)


@dataclass
class ExtractedTrajectory:
    points: np.ndarray           # (N, 2) grid-frame meters at t = dt .. N*dt
    prob: float
    mode_source: str             # "nms" or "fps"


@dataclass
class ExtractionConfig:
    threshold: float = 0.05
    n_nms: int = 5
    n_fps: int = 5
    min_radius: float = 2.0      # m
    radius_horizon: float = 0.5  # s, scales target speed into the NMS radius
    gate: float = 3.0            # m, refinement search radius

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


def grid_to_points(probs: np.ndarray, offsets: np.ndarray, threshold: float = 0.05, t: int = 0,
                   resolution: float = 1.0) -> PointSet:
    """Pixels with probability >= threshold, placed at pixel centre plus predicted offset."""
    probs = np.asarray(probs)
    u, v = np.nonzero(probs >= threshold)
    pix = np.stack([u, v], axis=1)
    off = np.asarray(offsets)[:, u, v].T if len(u) else np.zeros((0, 2))
    pos = (pix + off) * resolution
    return PointSet(t, pos, probs[u, v], pix).sorted()


def nms_radius(speed: float, cfg: ExtractionConfig = ExtractionConfig()) -> float:
    return max(cfg.min_radius, cfg.radius_horizon * speed)


def nms_modes(points: PointSet, radius: float, k: int = 5) -> PointSet:
    """Greedy suppression: keep the best remaining point, drop everything within ``radius`` of it."""
    alive = np.ones(len(points), dtype=bool)
    keep = []
    for i in range(len(points)):
        if len(keep) == k:
            break
        if not alive[i]:
            continue
        keep.append(i)
        d = np.linalg.norm(points.pos - points.pos[i], axis=1)
        alive &= d > radius
    return points.take(keep)


def farthest_point_sampling(pool: PointSet, selected: PointSet, k: int = 5) -> PointSet:
    """Add up to ``k`` points from ``pool``, each maximizing the min distance to everything chosen."""
    if len(selected) == 0:
        raise ValueError("farthest point sampling needs a non-empty selection")
    dmin = np.min(np.linalg.norm(pool.pos[:, None] - selected.pos[None], axis=2), axis=1) if len(pool) else np.zeros(0)
    picks = []
    for _ in range(k):
        if not len(dmin) or dmin.max() <= 0:
            break
        i = int(np.argmax(dmin))          # first maximum, i.e. pool order breaks ties
        picks.append(i)
        dmin = np.minimum(dmin, np.linalg.norm(pool.pos - pool.pos[i], axis=1))
    return pool.take(picks)


def const_accel_trajectory(pos0, vel0, endpoint, n: int, dt: float) -> np.ndarray:
    """Positions at t = dt..n*dt of the constant-acceleration path from (pos0, vel0) to ``endpoint``."""
    pos0, vel0, endpoint = (np.asarray(a, dtype=np.float64) for a in (pos0, vel0, endpoint))
    T = n * dt
    acc = 2.0 * (endpoint - pos0 - vel0 * T) / T ** 2
    t = dt * np.arange(1, n + 1)[:, None]
    out = pos0 + vel0 * t + 0.5 * acc * t ** 2
    out[-1] = endpoint
    return out


def refine_trajectory(init: np.ndarray, steps: list[PointSet], gate: float = 3.0) -> np.ndarray:
    """Snap each step to its nearest extracted point when that point lies within ``gate``."""
    out = np.array(init, dtype=np.float64)
    for i, ps in enumerate(steps):
        if len(ps) == 0:
            continue
        d = np.linalg.norm(ps.pos - out[i], axis=1)
        j = int(np.argmin(d))
        if d[j] <= gate:
            out[i] = ps.pos[j]
    return out


def smooth_trajectory(traj: np.ndarray) -> np.ndarray:
    """Centred 3-point moving average; the first and last points stay put."""
    traj = np.asarray(traj, dtype=np.float64)
    out = traj.copy()
    if len(traj) > 2:
        out[1:-1] = (traj[:-2] + traj[1:-1] + traj[2:]) / 3.0
    return out


def _clip_roi(traj: np.ndarray, shape, resolution: float) -> np.ndarray:
    u_max, v_max = shape
    lo = -0.5 * resolution
    return np.stack([np.clip(traj[:, 0], lo, (u_max - 0.5) * resolution),
                     np.clip(traj[:, 1], lo, (v_max - 0.5) * resolution)], axis=1)


def extract_k_trajectories(probs: np.ndarray, offsets: np.ndarray, pos0, vel0, k: int = 10, dt: float = 0.5,
                           cfg: ExtractionConfig = ExtractionConfig(), resolution: float = 1.0
                           ) -> list[ExtractedTrajectory]:
    """Full pipeline on one target's grids.

    probs: (N, U, V) target occupancy; offsets: (N, 2, U, V); pos0 / vel0: target state in
    grid-frame meters and m/s. Returns at most ``k`` modes sorted by probability.
    """
    probs = np.asarray(probs)
    n = probs.shape[0]
    steps = [grid_to_points(probs[t], offsets[t], cfg.threshold, t, resolution) for t in range(n)]
    last = steps[-1]
    if len(last) == 0:
        warnings.warn("no super-threshold pixels at the last step, no trajectories extracted", RuntimeWarning)
        return []
    speed = float(np.linalg.norm(vel0))
    ends = nms_modes(last, nms_radius(speed, cfg), cfg.n_nms)
    extra = farthest_point_sampling(last, ends, cfg.n_fps)
    cands = [(p, q, "nms") for p, q in zip(ends.pos, ends.prob)] + [(p, q, "fps") for p, q in zip(extra.pos, extra.prob)]
    # stable sort keeps NMS before FPS at equal probability
    cands.sort(key=lambda c: -c[1])
    out = []
    for end, prob, src in cands[:k]:
        init = _clip_roi(const_accel_trajectory(pos0, vel0, end, n, dt), probs.shape[1:], resolution)
        traj = smooth_trajectory(refine_trajectory(init, steps, cfg.gate))
        out.append(ExtractedTrajectory(traj, float(prob), src))
    return out


def trajectories_to_world(trajs: list[ExtractedTrajectory], frame: Frame) -> list[np.ndarray]:
    return [frame.to_world(tr.points / frame.resolution) for tr in trajs]


def trajectories_to_json(trajs: list[ExtractedTrajectory], frame: Frame, dt: float) -> str:
    body = {
        "frame": frame.to_dict(),
        "dt": dt,
        "trajectories": [
            {"mode": i, "prob": tr.prob, "source": tr.mode_source,
             "points": [{"t": round((j + 1) * dt, 9), "x": float(p[0]), "y": float(p[1])}
                        for j, p in enumerate(tr.points)]}
            for i, tr in enumerate(trajs)
        ],
    }
    return json.dumps(body, indent=1)


def trajectories_from_json(text: str) -> tuple[list[ExtractedTrajectory], Frame, float]:
    body = json.loads(text)
    trajs = [ExtractedTrajectory(np.array([[p["x"], p["y"]] for p in m["points"]], dtype=np.float64),
                                 float(m["prob"]), m.get("source", "nms"))
             for m in body["trajectories"]]
    return trajs, Frame.from_dict(body["frame"]), float(body["dt"])
