"""Heatmap rendering of predicted grids into binary PPM images."""
from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np


def step_color(t: int, n: int) -> np.ndarray:
    """Heatmap hue for step ``t`` of ``n``: red at the first step through to magenta at the last."""
    hue = 0.0 if n <= 1 else (5.0 / 6.0) * t / (n - 1)
    return np.array(colorsys.hsv_to_rgb(hue, 1.0, 1.0))


def occupancy(grids: np.ndarray) -> np.ndarray:
    """(N, U, V) max over class channels of an (N, |C|+2, U, V) prediction."""
    grids = np.asarray(grids)
    return np.clip(grids[:, :grids.shape[1] - 2].max(axis=1), 0.0, 1.0)


def to_bytes(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)


def ppm_bytes(rgb_u8: np.ndarray) -> bytes:
    h, w, _ = rgb_u8.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb_u8).tobytes()


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def render_layers(grids: np.ndarray, map_image: np.ndarray | None = None, map_alpha: float = 0.6):
    """Per-step images and a composite, each (U, V, 3) floats in [0, 1]."""
    occ = occupancy(grids)
    n = occ.shape[0]
    base = np.zeros(occ.shape[1:] + (3,))
    if map_image is not None:
        base = map_alpha * np.asarray(map_image).transpose(1, 2, 0)
    steps = []
    heat = np.zeros_like(base)
    for t in range(n):
        layer = occ[t][..., None] * step_color(t, n)
        steps.append(np.maximum(base, layer))
        # later steps only paint where they dominate earlier ones
        stronger = occ[t] >= heat.max(axis=2)
        heat[stronger] = layer[stronger]
    return steps, np.maximum(base, heat)


def write_renders(grids: np.ndarray, out_dir, map_image: np.ndarray | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps, comp = render_layers(grids, map_image)
    paths = []
    for t, img in enumerate(steps):
        p = out / f"step_{t + 1:02d}.ppm"
        p.write_bytes(ppm_bytes(to_bytes(img)))
        paths.append(p)
    p = out / "composite.ppm"
    p.write_bytes(ppm_bytes(to_bytes(comp)))
    paths.append(p)
    return paths
