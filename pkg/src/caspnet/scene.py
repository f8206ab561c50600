"""Scene data model and its JSON file format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import validate_polygon

KINDS = ("target", "vehicle", "pedestrian")


def wrap_angle(a: float) -> float:
    """Map an angle to [-pi, pi)."""
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass
class TrackPoint:
    t: int
    x: float
    y: float
    vx: float
    vy: float
    heading: float

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass
class Agent:
    id: str
    kind: str
    track: list[TrackPoint]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"agent {self.id}: unknown kind {self.kind!r}")
        ts = [p.t for p in self.track]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"agent {self.id}: track time indices must be strictly increasing")
        self._by_t = {p.t: p for p in self.track}

    def at(self, t: int) -> TrackPoint | None:
        return self._by_t.get(t)


@dataclass
class Lane:
    pts: np.ndarray   # (n, 2)
    dirs: np.ndarray  # (n,) radians


@dataclass
class VectorMap:
    drivable: list[np.ndarray] = field(default_factory=list)
    crossings: list[np.ndarray] = field(default_factory=list)
    lanes: list[Lane] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.drivable or self.crossings or self.lanes)


@dataclass
class Scene:
    agents: list[Agent]
    map: VectorMap
    dt: float = 0.5
    v_max: float = 15.0
    t0: int | None = None
    ego: str | None = None

    def __post_init__(self):
        n_target = sum(a.kind == "target" for a in self.agents)
        if n_target > 1:
            raise ValueError(f"scene has {n_target} target agents; at most one allowed")

    @property
    def target(self) -> Agent | None:
        return next((a for a in self.agents if a.kind == "target"), None)

    def agent(self, agent_id: str) -> Agent:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    def anchor(self) -> Agent:
        """Grid anchor: the target if present, else the ego vehicle, else the first vehicle."""
        if self.target is not None:
            return self.target
        if self.ego is not None:
            return self.agent(self.ego)
        for a in self.agents:
            if a.kind == "vehicle":
                return a
        raise ValueError("scene has no agent usable as grid anchor")

    def current_step(self, m_steps: int) -> int:
        return self.t0 if self.t0 is not None else m_steps - 1

    def with_target(self, agent_id: str) -> "Scene":
        """Copy with ``agent_id`` promoted to target and any previous target demoted to vehicle."""
        agents = []
        for a in self.agents:
            kind = a.kind
            if a.id == agent_id:
                kind = "target"
            elif kind == "target":
                kind = "vehicle"
            agents.append(Agent(a.id, kind, list(a.track)))
        return Scene(agents, self.map, self.dt, self.v_max, self.t0, self.ego)


# ---------------------------------------------------------------- JSON I/O

def _polys(raw) -> list[np.ndarray]:
    if not raw:
        return []
    # a single polygon may be given as a bare vertex list
    if isinstance(raw[0][0], (int, float)):
        raw = [raw]
    return [validate_polygon(p) for p in raw]


def scene_from_dict(d: dict) -> Scene:
    meta = d.get("meta", {})
    agents = []
    for a in d.get("agents", []):
        track = [TrackPoint(int(p["t"]), float(p["x"]), float(p["y"]), float(p["vx"]), float(p["vy"]),
                            wrap_angle(float(p["heading"]))) for p in a["track"]]
        agents.append(Agent(str(a["id"]), a["kind"], track))
    m = d.get("map", {})
    lanes = []
    for ln in m.get("lanes", []):
        pts = np.asarray(ln["pts"], dtype=np.float64).reshape(-1, 2)
        dirs = np.asarray(ln["dirs"], dtype=np.float64).reshape(-1)
        if len(pts) != len(dirs):
            raise ValueError("lane needs one direction per vertex")
        lanes.append(Lane(pts, dirs))
    vmap = VectorMap(_polys(m.get("drivable", [])), _polys(m.get("crossings", [])), lanes)
    scene = Scene(agents, vmap, float(meta.get("dt", 0.5)), float(meta.get("v_max", 15.0)),
                  meta.get("t0"), meta.get("ego"))
    for a in scene.agents:
        for p in a.track:
            if p.speed > scene.v_max + 1e-9:
                raise ValueError(f"agent {a.id} at t={p.t}: speed {p.speed:.3f} exceeds v_max {scene.v_max}")
    return scene


def scene_to_dict(scene: Scene) -> dict:
    meta = {"dt": scene.dt, "v_max": scene.v_max}
    if scene.t0 is not None:
        meta["t0"] = scene.t0
    if scene.ego is not None:
        meta["ego"] = scene.ego
    return {
        "meta": meta,
        "agents": [{"id": a.id, "kind": a.kind,
                    "track": [{"t": p.t, "x": p.x, "y": p.y, "vx": p.vx, "vy": p.vy, "heading": p.heading}
                              for p in a.track]} for a in scene.agents],
        "map": {
            "drivable": [p.tolist() for p in scene.map.drivable],
            "crossings": [p.tolist() for p in scene.map.crossings],
            "lanes": [{"pts": ln.pts.tolist(), "dirs": ln.dirs.tolist()} for ln in scene.map.lanes],
        },
    }


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1, sort_keys=True))
