"""Forecasting metrics: miss rates, minADE / minFDE over K modes, off-road rate."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import point_in_polygon

MISS_RADIUS = 2.0


def _min_dist(gt, preds) -> float:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    if not len(preds):
        return np.inf
    return float(np.min(np.linalg.norm(preds - np.asarray(gt, dtype=np.float64), axis=1)))


def miss_per_step(gt, preds, radius: float = MISS_RADIUS) -> bool:
    """A GT point is missed when no prediction lies within ``radius`` (exactly ``radius`` is a hit)."""
    return _min_dist(gt, preds) > radius


def miss_rate_track(gt, preds_per_step, in_roi=None, radius: float = MISS_RADIUS) -> bool:
    """True if any in-ROI step of the GT track is missed."""
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones(len(gt), dtype=bool) if in_roi is None else np.asarray(in_roi, dtype=bool)
    return any(miss_per_step(gt[t], preds_per_step[t], radius) for t in range(len(gt)) if mask[t])


def _top(modes, k: int):
    if not len(modes):
        raise ValueError("no modes to evaluate")
    return [np.asarray(m, dtype=np.float64) for m in list(modes)[:k]]


def min_ade(gt, modes, k: int) -> float:
    """Smallest mean L2 error over the first ``k`` modes (modes already sorted by probability)."""
    gt = np.asarray(gt, dtype=np.float64)
    # fsum: a correctly rounded mean that does not depend on summation order
    return min(math.fsum(np.linalg.norm(m - gt, axis=1)) / len(gt) for m in _top(modes, k))


def min_fde(gt, modes, k: int) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    return min(float(np.linalg.norm(m[-1:] - gt[-1:], axis=1)[0]) for m in _top(modes, k))


def on_drivable(pt, polygons) -> bool:
    return any(point_in_polygon(pt, poly) for poly in polygons)


def off_road_rate(modes, polygons) -> float:
    """Fraction of modes with at least one point outside the union of drivable polygons."""
    if not polygons:
        warnings.warn("empty drivable map, off-road rate reported as 0", RuntimeWarning)
        return 0.0
    if not len(modes):
        return 0.0
    off = sum(any(not on_drivable(p, polygons) for p in np.asarray(m)) for m in modes)
    return off / len(modes)


def constant_velocity_baseline(pos0, vel0, n: int, dt: float) -> np.ndarray:
    t = dt * np.arange(1, n + 1)[:, None]
    return np.asarray(pos0, dtype=np.float64) + np.asarray(vel0, dtype=np.float64) * t


@dataclass
class MetricsReport:
    mr_per_step: list
    mr_track: float
    min_ade: dict
    min_fde: dict
    off_road_rate: float
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {"mr_per_step": self.mr_per_step, "mr_track": self.mr_track,
                "min_ade": {str(k): v for k, v in self.min_ade.items()},
                "min_fde": {str(k): v for k, v in self.min_fde.items()},
                "off_road_rate": self.off_road_rate, "counts": self.counts}
        return json.dumps(body, indent=1)

    def csv_fields(self) -> dict:
        row = {f"mr_t{t + 1}": v for t, v in enumerate(self.mr_per_step)}
        row["mr_track"] = self.mr_track
        row.update({f"min_ade_k{k}": v for k, v in self.min_ade.items()})
        row.update({f"min_fde_k{k}": v for k, v in self.min_fde.items()})
        row["off_road_rate"] = self.off_road_rate
        row.update({f"n_{k}": v for k, v in self.counts.items()})
        return row

    def to_csv(self) -> str:
        row = self.csv_fields()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
        return buf.getvalue()


class MetricsAccumulator:
    """Collects per-target results and reduces them into a :class:`MetricsReport`."""

    def __init__(self, n_steps: int, ks=(1, 5, 10), radius: float = MISS_RADIUS):
        self.n = n_steps
        self.ks = tuple(ks)
        self.radius = radius
        self.step_miss = np.zeros(n_steps, dtype=np.int64)
        self.step_total = np.zeros(n_steps, dtype=np.int64)
        self.tracks = 0
        self.track_miss = 0
        self.ade = {k: [] for k in self.ks}
        self.fde = {k: [] for k in self.ks}
        self.off_modes = 0
        self.all_modes = 0

    def add_track(self, gt, preds_per_step, in_roi=None) -> bool:
        gt = np.asarray(gt, dtype=np.float64)
        mask = np.ones(len(gt), dtype=bool) if in_roi is None else np.asarray(in_roi, dtype=bool)
        missed = False
        for t in range(len(gt)):
            if not mask[t]:
                continue
            m = miss_per_step(gt[t], preds_per_step[t], self.radius)
            self.step_total[t] += 1
            self.step_miss[t] += m
            missed |= m
        if mask.any():
            self.tracks += 1
            self.track_miss += missed
        return missed

    def add_modes(self, gt, modes, polygons=None) -> None:
        if not len(modes):
            return
        for k in self.ks:
            self.ade[k].append(min_ade(gt, modes, k))
            self.fde[k].append(min_fde(gt, modes, k))
        if polygons:
            top = list(modes)[:max(self.ks)]
            self.off_modes += sum(any(not on_drivable(p, polygons) for p in np.asarray(m)) for m in top)
            self.all_modes += len(top)

    def report(self) -> MetricsReport:
        per_step = [float(m / n) if n else 0.0 for m, n in zip(self.step_miss, self.step_total)]
        return MetricsReport(
            mr_per_step=per_step,
            mr_track=self.track_miss / self.tracks if self.tracks else 0.0,
            min_ade={k: math.fsum(v) / len(v) if v else float("nan") for k, v in self.ade.items()},
            min_fde={k: math.fsum(v) / len(v) if v else float("nan") for k, v in self.fde.items()},
            off_road_rate=self.off_modes / self.all_modes if self.all_modes else 0.0,
            counts={"tracks": self.tracks, "gt_points": int(self.step_total.sum()),
                    "mode_sets": len(self.ade[self.ks[0]]), "modes": self.all_modes},
        )
