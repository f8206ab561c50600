"""Deterministic synthetic traffic scenes for training and evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .scene import Agent, Lane, Scene, TrackPoint, VectorMap, save_scene, wrap_angle

SCENARIO_KINDS = ("straight", "turn", "lead_stop_lane_change", "pedestrian_crossing", "bimodal_intersection")
A_MAX = 4.0          # m/s^2
LANE_W = 3.5
ROAD_LEN = 200.0


@dataclass
class ScenarioSpec:
    kind: str = "straight"
    n_vehicles: int = 2
    n_pedestrians: int = 1
    speed_range: tuple = (5.0, 12.0)
    seed: int = 0
    M: int = 3
    N: int = 12
    dt: float = 0.5
    v_max: float = 15.0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; choose from {', '.join(SCENARIO_KINDS)}")
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid speed range {self.speed_range}")
        if hi > self.v_max:
            raise ValueError(f"speed range upper bound {hi} exceeds v_max {self.v_max}")
        if self.n_vehicles < 0 or self.n_pedestrians < 0:
            raise ValueError("agent counts must be >= 0")

    @property
    def steps(self) -> int:
        return self.M + self.N


# ---------------------------------------------------------------- paths

class Path2D:
    """Polyline parameterized by arc length, densely sampled."""

    def __init__(self, pts):
        self.pts = np.asarray(pts, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.pts, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return np.stack([np.interp(s, self.s, self.pts[:, 0]), np.interp(s, self.s, self.pts[:, 1])], axis=-1)

    def heading(self, s) -> np.ndarray:
        d = self.at(np.asarray(s) + 0.05) - self.at(np.asarray(s) - 0.05)
        return np.arctan2(d[..., 1], d[..., 0])


def line(p0, p1, step: float = 0.25) -> np.ndarray:
    n = max(int(math.ceil(math.dist(p0, p1) / step)), 1)
    return np.linspace(p0, p1, n + 1)


def arc(center, radius: float, a0: float, a1: float, step: float = 0.25) -> np.ndarray:
    n = max(int(math.ceil(abs(a1 - a0) * radius / step)), 2)
    a = np.linspace(a0, a1, n + 1)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], axis=1)


def join(*parts) -> np.ndarray:
    out = [parts[0]]
    for p in parts[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.vstack(out)


def turn_path(start_x: float, y_lane: float, corner_x: float, radius: float, left: bool, length: float = 150.0):
    """Drive east along ``y_lane`` then turn 90 degrees left (north) or right (south)."""
    sign = 1.0 if left else -1.0
    a = line((start_x, y_lane), (corner_x, y_lane))
    c = (corner_x, y_lane + sign * radius)
    if left:
        b = arc(c, radius, -math.pi / 2, 0.0)
        end = (corner_x + radius, y_lane + radius + length)
    else:
        b = arc(c, radius, math.pi / 2, 0.0)
        end = (corner_x + radius, y_lane - radius - length)
    d = line(tuple(b[-1]), end)
    return Path2D(join(a, b, d))


def lane_change_path(start_x: float, y0: float, y1: float, x_start: float, x_len: float, end_x: float):
    """Straight, smooth cosine lateral shift from y0 to y1 over [x_start, x_start + x_len], straight."""
    xs = np.arange(start_x, end_x + 0.25, 0.25)
    f = np.clip((xs - x_start) / x_len, 0.0, 1.0)
    ys = y0 + (y1 - y0) * (0.5 - 0.5 * np.cos(math.pi * f))
    return Path2D(np.stack([xs, ys], axis=1))


# ---------------------------------------------------------------- tracks

def _speed_profile(rng, n: int, v0: float, lo: float, hi: float, dt: float, a_lim: float = 1.0) -> np.ndarray:
    """Per-step speeds drifting within [lo, hi] with bounded change."""
    v = np.empty(n)
    v[0] = v0
    acc = rng.uniform(-a_lim, a_lim)
    for i in range(1, n):
        acc = float(np.clip(acc + rng.normal(scale=0.3), -a_lim, a_lim))
        v[i] = float(np.clip(v[i - 1] + acc * dt, lo, hi))
    return v


def track_from_path(path: Path2D, speeds: np.ndarray, s0: float, dt: float) -> np.ndarray:
    """Positions (T, 2) after advancing ``speeds[t]*dt`` of arc length per step."""
    s = s0 + np.concatenate([[0.0], np.cumsum(speeds[1:] * dt)])
    return path.at(np.minimum(s, path.length))


def make_track(pos: np.ndarray, dt: float, init_heading: float | None = None) -> list[TrackPoint]:
    """Velocities as backward differences (forward difference at the first step)."""
    pos = np.asarray(pos, dtype=np.float64)
    vel = np.empty_like(pos)
    vel[1:] = (pos[1:] - pos[:-1]) / dt
    vel[0] = vel[1] if len(pos) > 1 else 0.0
    out = []
    heading = init_heading
    for t, (p, v) in enumerate(zip(pos, vel)):
        if math.hypot(*v) > 0.1 or heading is None:
            heading = math.atan2(v[1], v[0]) if math.hypot(*v) > 0 else (heading or 0.0)
        out.append(TrackPoint(t, float(p[0]), float(p[1]), float(v[0]), float(v[1]), wrap_angle(heading)))
    return out


def kinematics_ok(track: list[TrackPoint], dt: float, v_max: float) -> bool:
    for a, b in zip(track, track[1:]):
        if math.hypot(b.vx - a.vx, b.vy - a.vy) > A_MAX * dt + 1e-9:
            return False
    return all(p.speed <= v_max + 1e-9 for p in track)


# ---------------------------------------------------------------- maps

def rect(x0, x1, y0, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def lane_from_path(pts, reverse: bool = False, step: float = 2.0) -> Lane:
    p = Path2D(pts[::-1] if reverse else pts)
    s = np.arange(0.0, p.length + 1e-9, step)
    return Lane(p.at(s), p.heading(s))


def straight_road_map(x0=-60.0, x1=ROAD_LEN, lanes_each_way: int = 1) -> VectorMap:
    half = lanes_each_way * LANE_W
    vmap = VectorMap([rect(x0, x1, -half, half)])
    for i in range(lanes_each_way):
        y = -(i + 0.5) * LANE_W
        vmap.lanes.append(lane_from_path(line((x0, y), (x1, y))))
        vmap.lanes.append(lane_from_path(line((x0, -y), (x1, -y)), reverse=True))
    return vmap


# ---------------------------------------------------------------- scenarios

class _Builder:
    def __init__(self, spec: ScenarioSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.agents: list[Agent] = []

    def add(self, aid: str, kind: str, pos: np.ndarray, heading: float | None = None) -> None:
        tr = make_track(pos, self.spec.dt, heading)
        if not kinematics_ok(tr, self.spec.dt, self.spec.v_max):
            raise _Retry(aid)
        self.agents.append(Agent(aid, kind, tr))

    def speeds(self, v0=None, lo=None, hi=None, a_lim=1.0):
        s_lo, s_hi = self.spec.speed_range
        lo = s_lo if lo is None else lo
        hi = s_hi if hi is None else hi
        v0 = self.rng.uniform(lo, hi) if v0 is None else v0
        return _speed_profile(self.rng, self.spec.steps, v0, lo, hi, self.spec.dt, a_lim)

    def pedestrians(self, n: int, y_side: float, x_lo: float, x_hi: float, prefix="p") -> None:
        for i in range(n):
            x = self.rng.uniform(x_lo, x_hi)
            y = y_side + np.sign(y_side) * self.rng.uniform(0.5, 2.5)
            d = self.rng.choice([-1.0, 1.0])
            v = self.rng.uniform(0.8, 1.8)
            path = Path2D(line((x, y), (x + d * 60, y)))
            speeds = _speed_profile(self.rng, self.spec.steps, v, 0.5, 2.0, self.spec.dt, 0.3)
            self.add(f"{prefix}{i}", "pedestrian", track_from_path(path, speeds, 0.0, self.spec.dt))

    def traffic(self, n: int, lane_ys, x_lo: float, x_hi: float, avoid=(), prefix="v") -> None:
        """Vehicles on straight lanes; lane_ys carries (y, direction) pairs."""
        placed = 0
        tries = 0
        while placed < n and tries < 50:
            tries += 1
            y, d = lane_ys[int(self.rng.integers(len(lane_ys)))]
            x = self.rng.uniform(x_lo, x_hi)
            if any(abs(x - ax) < 12 and abs(y - ay) < 1 for ax, ay in avoid):
                continue
            path = Path2D(line((x, y), (x + d * 300, y)))
            pos = track_from_path(path, self.speeds(), 0.0, self.spec.dt)
            self.add(f"{prefix}{placed}", "vehicle", pos)
            avoid = tuple(avoid) + ((x, y),)
            placed += 1


class _Retry(Exception):
    pass


def _straight(b: _Builder) -> VectorMap:
    vmap = straight_road_map(lanes_each_way=2)
    y = -0.5 * LANE_W
    path = Path2D(line((0.0, y), (400.0, y)))
    b.add("target", "target", track_from_path(path, b.speeds(), 0.0, b.spec.dt))
    b.traffic(b.spec.n_vehicles, [(-1.5 * LANE_W, 1), (0.5 * LANE_W, -1), (1.5 * LANE_W, -1)], -20, 120,
              avoid=[(0.0, y)])
    b.pedestrians(b.spec.n_pedestrians, 2 * LANE_W, -10, 100)
    return vmap


def _turn(b: _Builder) -> VectorMap:
    left = bool(b.rng.integers(2))
    radius = float(b.rng.uniform(12.0, 16.0))
    y = -0.5 * LANE_W
    corner = float(b.rng.uniform(4.0, 14.0))
    r_eff = radius + (LANE_W if left else 0.0)
    path = turn_path(-40.0, y, corner, r_eff, left)
    # slow enough that the heading rate keeps |dv| within the acceleration limit
    v = b.speeds(lo=4.0, hi=min(7.0, b.spec.speed_range[1]), a_lim=0.5)
    pos = track_from_path(path, v, 40.0, b.spec.dt)
    b.add("target", "target", pos)
    # road: horizontal arm up to the corner, vertical arm going north or south
    cx = corner + radius + 0.5 * LANE_W        # centre line of the crossing road
    arm = rect(-80.0, cx + LANE_W, -LANE_W, LANE_W)
    if left:
        vert = rect(cx - LANE_W, cx + LANE_W, -LANE_W, 150.0)
        fill = rect(corner, cx + LANE_W, -LANE_W, y + r_eff)
    else:
        vert = rect(cx - LANE_W, cx + LANE_W, -150.0, LANE_W)
        fill = rect(corner, cx + LANE_W, y - r_eff, LANE_W)
    vmap = VectorMap([arm, vert, fill])
    vmap.lanes.append(lane_from_path(path.pts))
    back = turn_path(-40.0, -y, corner, radius + (0.0 if left else LANE_W), left)
    vmap.lanes.append(lane_from_path(back.pts, reverse=True))
    b.traffic(b.spec.n_vehicles, [(0.5 * LANE_W, -1)], cx - 60, cx - 5)
    b.pedestrians(b.spec.n_pedestrians, -LANE_W if left else LANE_W, -60, corner)
    return vmap


def _lead_stop(b: _Builder) -> VectorMap:
    vmap = straight_road_map(lanes_each_way=2)
    y0, y1 = -1.5 * LANE_W, -0.5 * LANE_W
    v = float(b.rng.uniform(8.0, min(12.0, b.spec.v_max)))
    lead_x = float(b.rng.uniform(45.0, 60.0))
    b.add("lead", "vehicle", np.tile([lead_x, y0], (b.spec.steps, 1)), heading=0.0)
    # the follower keeps its lane until the gap closes to 15 m, then shifts over about 25 m
    x_start = lead_x - 15.0
    path = lane_change_path(0.0, y0, y1, x_start, 25.0, 400.0)
    pos = track_from_path(path, b.speeds(v0=v, lo=v - 1, hi=v + 1, a_lim=0.3), 0.0, b.spec.dt)
    b.add("target", "target", pos)
    b.traffic(max(b.spec.n_vehicles - 1, 0), [(0.5 * LANE_W, -1), (1.5 * LANE_W, -1)], 0, 120)
    b.pedestrians(b.spec.n_pedestrians, 2 * LANE_W, 0, 100)
    return vmap


def _ped_crossing(b: _Builder) -> VectorMap:
    vmap = straight_road_map(lanes_each_way=1)
    cx = float(b.rng.uniform(35.0, 50.0))
    vmap.crossings.append(rect(cx - 2.0, cx + 2.0, -LANE_W - 1, LANE_W + 1))
    y = -0.5 * LANE_W
    v0 = float(b.rng.uniform(6.0, 9.0))
    stop_at = cx - 4.0
    # brake smoothly so the vehicle halts in front of the crossing
    dt, n = b.spec.dt, b.spec.steps
    speeds = [v0]
    x = 0.0
    for _ in range(n - 1):
        remaining = stop_at - x
        need = speeds[-1] ** 2 / (2 * max(remaining, 0.1))
        dec = min(need, A_MAX * 0.9) if remaining < speeds[-1] ** 2 / (2 * 2.0) + 5 else 0.0
        nv = max(speeds[-1] - dec * dt, 0.0)
        x += nv * dt
        speeds.append(nv)
    path = Path2D(line((0.0, y), (400.0, y)))
    b.add("target", "target", track_from_path(path, np.array(speeds), 0.0, dt))
    walk = float(b.rng.uniform(1.0, 1.6))
    side = float(b.rng.choice([-1.0, 1.0]))
    ped = Path2D(line((cx, side * (LANE_W + 2)), (cx, -side * (LANE_W + 30))))
    b.add("p_cross", "pedestrian",
          track_from_path(ped, _speed_profile(b.rng, n, walk, 0.8, 1.8, dt, 0.2), 0.0, dt))
    b.traffic(b.spec.n_vehicles, [(0.5 * LANE_W, -1)], 10, 120)
    b.pedestrians(max(b.spec.n_pedestrians - 1, 0), LANE_W, 0, 100, prefix="p_side")
    return vmap


def _bimodal(b: _Builder) -> VectorMap:
    cx = float(b.rng.uniform(25.0, 40.0))
    vmap = VectorMap([rect(-80.0, ROAD_LEN, -LANE_W, LANE_W), rect(cx - LANE_W, cx + LANE_W, -120.0, 120.0)])
    y = -0.5 * LANE_W
    vmap.lanes.append(lane_from_path(line((-80.0, y), (ROAD_LEN, y))))
    vmap.lanes.append(lane_from_path(line((-80.0, -y), (ROAD_LEN, -y)), reverse=True))
    vmap.lanes.append(lane_from_path(line((cx + 0.5 * LANE_W, -120.0), (cx + 0.5 * LANE_W, 120.0))))
    vmap.lanes.append(lane_from_path(line((cx - 0.5 * LANE_W, 120.0), (cx - 0.5 * LANE_W, -120.0))))
    go_left = bool(b.rng.integers(2))
    radius = 12.0
    if go_left:
        path = turn_path(0.0, y, cx + 0.5 * LANE_W - radius, radius, True)
        v = b.speeds(lo=4.0, hi=7.0, a_lim=0.5)
    else:
        path = Path2D(line((0.0, y), (400.0, y)))
        v = b.speeds(lo=4.0, hi=7.0, a_lim=0.5)
    b.add("target", "target", track_from_path(path, v, 0.0, b.spec.dt))
    b.traffic(b.spec.n_vehicles, [(-y, -1)], cx + 20, 120)
    b.pedestrians(b.spec.n_pedestrians, LANE_W, -40, cx - 5)
    return vmap


_BUILDERS = {"straight": _straight, "turn": _turn, "lead_stop_lane_change": _lead_stop,
             "pedestrian_crossing": _ped_crossing, "bimodal_intersection": _bimodal}


def _transform(scene_agents, vmap: VectorMap, angle: float, shift) -> tuple[list[Agent], VectorMap]:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    shift = np.asarray(shift, dtype=np.float64)

    def tp(p: TrackPoint) -> TrackPoint:
        x, y = rot @ (p.x, p.y) + shift
        vx, vy = rot @ (p.vx, p.vy)
        return TrackPoint(p.t, float(x), float(y), float(vx), float(vy), wrap_angle(p.heading + angle))

    agents = [Agent(a.id, a.kind, [tp(p) for p in a.track]) for a in scene_agents]
    poly = lambda P: P @ rot.T + shift
    lanes = [Lane(poly(ln.pts), np.array([wrap_angle(d + angle) for d in ln.dirs])) for ln in vmap.lanes]
    return agents, VectorMap([poly(p) for p in vmap.drivable], [poly(p) for p in vmap.crossings], lanes)


def generate(spec: ScenarioSpec) -> Scene:
    """Build one scene with M past and N future steps; the focal agent is the target."""
    rng = np.random.default_rng(spec.seed)
    for _ in range(100):
        b = _Builder(spec, rng)
        try:
            vmap = _BUILDERS[spec.kind](b)
        except _Retry:
            continue
        angle = float(rng.uniform(-math.pi, math.pi))
        shift = rng.uniform(-500.0, 500.0, size=2).round(3)
        agents, vmap = _transform(b.agents, vmap, angle, shift)
        # the world-frame velocities are rotated finite differences; re-derive them so that
        # they match the stored positions exactly
        agents = [Agent(a.id, a.kind, make_track(np.array([(p.x, p.y) for p in a.track]), spec.dt,
                                                 a.track[0].heading)) for a in agents]
        return Scene(agents, vmap, spec.dt, spec.v_max, t0=spec.M - 1)
    raise RuntimeError(f"could not generate a kinematically valid {spec.kind} scene for seed {spec.seed}")


# ---------------------------------------------------------------- datasets

def scene_seeds(seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(count)]


def generate_dataset(out_dir, count: int, kinds=SCENARIO_KINDS, seed: int = 0, **spec_kw) -> Path:
    """Write ``count`` scene files plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kinds = list(kinds)
    for k in kinds:
        if k not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {k!r}; choose from {', '.join(SCENARIO_KINDS)}")
    entries = []
    for i, s in enumerate(scene_seeds(seed, count)):
        spec = ScenarioSpec(kind=kinds[i % len(kinds)], seed=s, **spec_kw)
        name = f"scene_{i:05d}.json"
        save_scene(generate(spec), out / name)
        d = asdict(spec)
        d["speed_range"] = list(d["speed_range"])
        entries.append({"path": name, "spec": d})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"seed": seed, "scenes": entries}, indent=1, sort_keys=True))
    return manifest


def read_manifest(path) -> list[Path]:
    path = Path(path)
    body = json.loads(path.read_text())
    return [path.parent / e["path"] for e in body["scenes"]]


def split(items, ratios=(0.8, 0.2), seed: int = 0) -> list[list]:
    """Seeded shuffle into disjoint consecutive partitions sized by ``ratios``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    items = list(items)
    order = np.random.default_rng(seed).permutation(len(items))
    bounds = np.rint(np.cumsum(ratios) * len(items)).astype(int)
    bounds[-1] = len(items)
    parts, start = [], 0
    for end in bounds:
        parts.append([items[i] for i in order[start:end]])
        start = end
    return parts
