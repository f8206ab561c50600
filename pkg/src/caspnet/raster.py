"""Rasterization of scenes into input grids, map images and Gaussian ground truth."""
from __future__ import annotations

import colorsys
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import fill_mask
from .scene import Agent, Lane, Scene, TrackPoint, VectorMap, wrap_angle

INPUT_CHANNELS = ("target", "vehicle", "pedestrian", "du", "dv", "vu", "vv")
SCENE_CLASSES = ("target", "vehicle", "pedestrian")
TARGET_CLASSES = ("target",)
DRIVABLE_COLOR = (0.3, 0.3, 0.3)
CROSSING_COLOR = (0.8, 0.8, 0.2)
STATIONARY_SPEED = 0.1


@dataclass(frozen=True)
class RasterConfig:
    U: int = 152
    V: int = 80
    resolution: float = 1.0
    anchor_u: int = 122
    anchor_v: int = 40
    M: int = 3
    N: int = 12
    dt_in: float = 0.5
    dt_out: float = 0.5

    def __post_init__(self):
        if not (0 <= self.anchor_u < self.U and 0 <= self.anchor_v < self.V):
            raise ValueError("anchor must lie inside the grid")
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be >= 1")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")


@dataclass
class KernelParams:
    """Per-step std-dev schedules (index 0 is the first future step) and the velocity cap."""

    sigma_initial_long: np.ndarray
    sigma_initial_lat: np.ndarray
    sigma_max_long: np.ndarray
    sigma_max_lat: np.ndarray
    v_max: float = 15.0

    def __post_init__(self):
        for name in ("sigma_initial_long", "sigma_initial_lat", "sigma_max_long", "sigma_max_lat"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(arr <= 0):
                raise ValueError(f"{name} entries must be > 0")
            setattr(self, name, arr)
        if np.any(self.sigma_initial_long < self.sigma_initial_lat) or \
                np.any(self.sigma_max_long < self.sigma_max_lat):
            raise ValueError("longitudinal sigma must not be smaller than lateral sigma")
        if self.v_max <= 0:
            raise ValueError("v_max must be > 0")

    @classmethod
    def default(cls, n_steps: int = 12, v_max: float = 15.0) -> "KernelParams":
        t = np.arange(1, n_steps + 1, dtype=np.float64)
        return cls(1.0 + 0.2 * t, 0.5 + 0.1 * t, np.full(n_steps, 4.0), np.full(n_steps, 2.0), v_max)


@dataclass(frozen=True)
class Frame:
    """Rigid map from world meters to continuous grid coordinates.

    The anchor's heading points toward decreasing ``u`` (so the grid holds ``anchor_u`` pixels
    ahead of the anchor) and its right-hand side toward increasing ``v``; rendered with ``u`` as
    the row index, forward is up.
    """

    x0: float
    y0: float
    heading: float
    anchor_u: float = 122.0
    anchor_v: float = 40.0
    resolution: float = 1.0

    def to_grid(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        dx, dy = xy[..., 0] - self.x0, xy[..., 1] - self.y0
        c, s = math.cos(self.heading), math.sin(self.heading)
        fwd = c * dx + s * dy
        left = -s * dx + c * dy
        return np.stack([self.anchor_u - fwd / self.resolution, self.anchor_v - left / self.resolution], axis=-1)

    def to_world(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        fwd = (self.anchor_u - uv[..., 0]) * self.resolution
        left = (self.anchor_v - uv[..., 1]) * self.resolution
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.stack([self.x0 + c * fwd - s * left, self.y0 + s * fwd + c * left], axis=-1)

    def rotate(self, vec) -> np.ndarray:
        """World-frame vector (e.g. velocity in m/s) expressed along the grid axes."""
        vec = np.asarray(vec, dtype=np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.stack([-(c * vec[..., 0] + s * vec[..., 1]), -(-s * vec[..., 0] + c * vec[..., 1])], axis=-1)

    def unrotate(self, vec) -> np.ndarray:
        """Inverse of :meth:`rotate`."""
        vec = np.asarray(vec, dtype=np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        fwd, left = -vec[..., 0], -vec[..., 1]
        return np.stack([c * fwd - s * left, s * fwd + c * left], axis=-1)

    def relative_heading(self, heading: float) -> float:
        """Heading relative to the anchor heading (0 = same direction)."""
        return wrap_angle(heading - self.heading)

    def heading_to_grid(self, heading: float) -> float:
        """Direction angle atan2(dv, du) of a world heading in grid axes."""
        return wrap_angle(heading - self.heading + math.pi)

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "heading": self.heading, "anchor_u": self.anchor_u,
                "anchor_v": self.anchor_v, "resolution": self.resolution}

    @classmethod
    def from_dict(cls, d: dict) -> "Frame":
        return cls(**{k: float(v) for k, v in d.items()})


def scene_frame(scene: Scene, t0: int, cfg: RasterConfig = RasterConfig()) -> Frame:
    anchor = scene.anchor()
    st = anchor.at(t0)
    if st is None:
        raise ValueError(f"anchor agent {anchor.id} has no state at t0={t0}")
    return Frame(st.x, st.y, st.heading, float(cfg.anchor_u), float(cfg.anchor_v), cfg.resolution)


def pixel_and_offset(uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest pixel index and the in-pixel offset in [-0.5, 0.5)."""
    pix = np.floor(np.asarray(uv) + 0.5)
    return pix.astype(np.int64), np.asarray(uv) - pix


def _in_roi(pix, cfg: RasterConfig) -> bool:
    return 0 <= pix[0] < cfg.U and 0 <= pix[1] < cfg.V


def rasterize_trajectories(scene: Scene, cfg: RasterConfig, t0: int, frame: Frame | None = None) -> np.ndarray:
    """Input grids of shape (M, 7, U, V) for steps t0-M+1 .. t0."""
    frame = frame or scene_frame(scene, t0, cfg)
    grids = np.zeros((cfg.M, len(INPUT_CHANNELS), cfg.U, cfg.V), dtype=np.float32)
    for m in range(cfg.M):
        t = t0 - (cfg.M - 1) + m
        for agent in scene.agents:
            st = agent.at(t)
            if st is None:
                continue
            pix, off = pixel_and_offset(frame.to_grid((st.x, st.y)))
            if not _in_roi(pix, cfg):
                continue
            vel = frame.rotate((st.vx, st.vy))
            u, v = pix
            grids[m, SCENE_CLASSES.index(agent.kind), u, v] = 1.0
            grids[m, 3:5, u, v] = off
            grids[m, 5:7, u, v] = vel
    return grids


def lane_direction_color(angle: float) -> tuple[float, float, float]:
    """RGB for a direction via full-saturation HSV with hue = angle / 2pi (0 rad is red)."""
    hue = (angle % (2 * math.pi)) / (2 * math.pi)
    return colorsys.hsv_to_rgb(hue, 1.0, 1.0)


def _interp_angle(a: float, b: float, w: float) -> float:
    return a + w * wrap_angle(b - a)


def rasterize_map(vmap: VectorMap, cfg: RasterConfig, frame: Frame) -> np.ndarray:
    """Bird's-eye RGB image (3, U, V): drivable area, then crossings, then lane centerlines."""
    img = np.zeros((3, cfg.U, cfg.V), dtype=np.float32)
    uu, vv = np.meshgrid(np.arange(cfg.U, dtype=np.float64), np.arange(cfg.V, dtype=np.float64), indexing="ij")
    for polys, color in ((vmap.drivable, DRIVABLE_COLOR), (vmap.crossings, CROSSING_COLOR)):
        for poly in polys:
            mask = fill_mask(frame.to_grid(poly), uu, vv)
            img[:, mask] = np.asarray(color, dtype=np.float32)[:, None]
    step = 0.25
    for lane in vmap.lanes:
        g = frame.to_grid(lane.pts)
        for k in range(len(g) - 1):
            seg = g[k + 1] - g[k]
            n = max(int(math.ceil(np.hypot(*seg) / step)), 1)
            for j in range(n + 1):
                w = j / n
                pix, _ = pixel_and_offset(g[k] + w * seg)
                if not _in_roi(pix, cfg):
                    continue
                ang = frame.relative_heading(_interp_angle(lane.dirs[k], lane.dirs[k + 1], w))
                img[:, pix[0], pix[1]] = lane_direction_color(ang % (2 * math.pi))
    return img


def sigma_for(v: float, t: int, r: str, kp: KernelParams) -> float:
    """Std-dev (m) for future step ``t`` (1-based) in direction ``r`` ('long' or 'lat')."""
    if v > kp.v_max:
        warnings.warn(f"speed {v:.3f} exceeds v_max {kp.v_max}; clamped", RuntimeWarning, stacklevel=2)
        v = kp.v_max
    v = max(v, 0.0)
    if r == "long":
        return kp.sigma_max_long[t - 1] / kp.v_max * v + kp.sigma_initial_long[t - 1]
    if r == "lat":
        return kp.sigma_max_lat[t - 1] / kp.v_max * v + kp.sigma_initial_lat[t - 1]
    raise ValueError(f"unknown direction {r!r}")


def _effective_heading(agent: Agent, t: int) -> float:
    st = agent.at(t)
    if st.speed >= STATIONARY_SPEED:
        return st.heading
    for p in reversed(agent.track):
        if p.t < t and p.speed >= STATIONARY_SPEED:
            return p.heading
    return st.heading


def gaussian_patch(sigma_long_px: float, sigma_lat_px: float, theta: float):
    """Rotated anisotropic kernel truncated at 3 sigma; returns (offsets_u, offsets_v, values)."""
    r = int(math.ceil(3 * max(sigma_long_px, sigma_lat_px)))
    du, dv = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    c, s = math.cos(theta), math.sin(theta)
    lon = du * c + dv * s
    lat = -du * s + dv * c
    q = (lon / sigma_long_px) ** 2 + (lat / sigma_lat_px) ** 2
    vals = np.where(q <= 9.0, np.exp(-0.5 * q), 0.0)
    return du, dv, vals


def make_ground_truth(scene: Scene, cfg: RasterConfig, kp: KernelParams, frame: Frame, t0: int,
                      classes=SCENE_CLASSES) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth grids (N, |C|+2, U, V) and per-step per-class agent counts (N, |C|)."""
    nc = len(classes)
    y = np.zeros((cfg.N, nc + 2, cfg.U, cfg.V), dtype=np.float32)
    counts = np.zeros((cfg.N, nc), dtype=np.int64)
    res = cfg.resolution
    for agent in scene.agents:
        if agent.kind not in classes:
            continue
        ci = classes.index(agent.kind)
        for k in range(1, cfg.N + 1):
            st = agent.at(t0 + k)
            if st is None:
                continue
            pix, off = pixel_and_offset(frame.to_grid((st.x, st.y)))
            if not _in_roi(pix, cfg):
                continue
            counts[k - 1, ci] += 1
            theta = frame.heading_to_grid(_effective_heading(agent, t0 + k))
            sl = sigma_for(st.speed, k, "long", kp) / res
            sa = sigma_for(st.speed, k, "lat", kp) / res
            du, dv, vals = gaussian_patch(sl, sa, theta)
            uu, vv = du + pix[0], dv + pix[1]
            ok = (uu >= 0) & (uu < cfg.U) & (vv >= 0) & (vv < cfg.V)
            chan = y[k - 1, ci]
            chan[uu[ok], vv[ok]] = np.maximum(chan[uu[ok], vv[ok]], vals[ok])
            chan[pix[0], pix[1]] = 1.0
            y[k - 1, nc:, pix[0], pix[1]] = off
    return y, counts


# ---------------------------------------------------------------- augmentation

def rigid_transform(scene: Scene, angle: float, shift, pivot) -> Scene:
    """Rotate every agent and map element by ``angle`` about ``pivot``, then translate by ``shift``."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    pivot = np.asarray(pivot, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)

    def tp(xy):
        return (np.asarray(xy, dtype=np.float64) - pivot) @ rot.T + pivot + shift

    agents = []
    for a in scene.agents:
        track = []
        for p in a.track:
            x, y = tp((p.x, p.y))
            vx, vy = rot @ (p.vx, p.vy)
            track.append(TrackPoint(p.t, float(x), float(y), float(vx), float(vy), wrap_angle(p.heading + angle)))
        agents.append(Agent(a.id, a.kind, track))
    vmap = VectorMap([tp(p) for p in scene.map.drivable], [tp(p) for p in scene.map.crossings],
                     [Lane(tp(ln.pts), ln.dirs + angle) for ln in scene.map.lanes])
    return Scene(agents, vmap, scene.dt, scene.v_max, scene.t0, scene.ego)


def augment(scene: Scene, rng: np.random.Generator, t0: int) -> Scene:
    """Random rotation in [0, 2pi) about the anchor position plus a translation in [-3, 3] m per axis."""
    angle = rng.uniform(0.0, 2 * math.pi)
    shift = rng.uniform(-3.0, 3.0, size=2)
    st = scene.anchor().at(t0)
    return rigid_transform(scene, angle, shift, (st.x, st.y))


@dataclass
class Sample:
    inputs: np.ndarray      # (M, 7, U, V)
    map_image: np.ndarray   # (3, U, V)
    target: np.ndarray      # (N, |C|+2, U, V)
    counts: np.ndarray      # (N, |C|)
    frame: Frame
    t0: int


def build_sample(scene: Scene, cfg: RasterConfig, kp: KernelParams, classes=SCENE_CLASSES,
                 rng: np.random.Generator | None = None) -> Sample:
    """Rasterize one training/eval sample. With ``rng`` the scene is augmented inside a fixed frame."""
    t0 = scene.current_step(cfg.M)
    frame = scene_frame(scene, t0, cfg)
    if rng is not None:
        scene = augment(scene, rng, t0)
    inputs = rasterize_trajectories(scene, cfg, t0, frame)
    image = rasterize_map(scene.map, cfg, frame)
    y, counts = make_ground_truth(scene, cfg, kp, frame, t0, classes)
    return Sample(inputs, image, y, counts, frame, t0)
