"""Polygon helpers: validation, even-odd fill and boundary-inclusive containment."""
from __future__ import annotations

import numpy as np


def _as_ring(poly) -> np.ndarray:
    pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    return pts


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12 and \
            min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (o1 == 0 and on_seg(p1, p2, q1)) or (o2 == 0 and on_seg(p1, p2, q2)) or \
        (o3 == 0 and on_seg(q1, q2, p1)) or (o4 == 0 and on_seg(q1, q2, p2))


def validate_polygon(poly) -> np.ndarray:
    """Return the polygon as an open ring, raising ValueError if it is degenerate or self-intersecting."""
    ring = _as_ring(poly)
    n = len(ring)
    if n < 3:
        raise ValueError(f"polygon needs at least 3 vertices, got {n}")
    if not np.all(np.isfinite(ring)):
        raise ValueError("polygon has non-finite coordinates")
    for i in range(n):
        a1, a2 = ring[i], ring[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_cross(a1, a2, ring[j], ring[(j + 1) % n]):
                raise ValueError(f"polygon self-intersects (edges {i} and {j})")
    area = 0.5 * np.sum(ring[:, 0] * np.roll(ring[:, 1], -1) - np.roll(ring[:, 0], -1) * ring[:, 1])
    if abs(area) < 1e-12:
        raise ValueError("polygon has zero area")
    return ring


def fill_mask(poly, u_coords: np.ndarray, v_coords: np.ndarray) -> np.ndarray:
    """Even-odd scanline test of points (u, v) against a polygon given in the same frame."""
    ring = _as_ring(poly)
    inside = np.zeros(u_coords.shape, dtype=bool)
    u0, v0 = ring[:, 0], ring[:, 1]
    u1, v1 = np.roll(u0, -1), np.roll(v0, -1)
    for a_u, a_v, b_u, b_v in zip(u0, v0, u1, v1):
        if a_u == b_u:
            continue
        straddle = (a_u > u_coords) != (b_u > u_coords)
        v_cross = a_v + (u_coords - a_u) * (b_v - a_v) / (b_u - a_u)
        inside ^= straddle & (v_coords < v_cross)
    return inside


def point_in_polygon(pt, poly, tol: float = 1e-9) -> bool:
    """Containment test with points on the boundary counted as inside."""
    ring = _as_ring(poly)
    x, y = float(pt[0]), float(pt[1])
    n = len(ring)
    inside = False
    for i in range(n):
        ax, ay = ring[i]
        bx, by = ring[(i + 1) % n]
        # boundary check: collinear and within the segment's bounding box
        cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
        seg_len = np.hypot(bx - ax, by - ay)
        if abs(cross) <= tol * max(seg_len, 1.0) and \
                min(ax, bx) - tol <= x <= max(ax, bx) + tol and min(ay, by) - tol <= y <= max(ay, by) + tol:
            return True
        if (ay > y) != (by > y):
            x_cross = ax + (y - ay) * (bx - ax) / (by - ay)
            if x < x_cross:
                inside = not inside
    return inside
