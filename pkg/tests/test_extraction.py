import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caspnet.extraction import (ExtractionConfig, PointSet, const_accel_trajectory, extract_k_trajectories,
                                farthest_point_sampling, grid_to_points, nms_modes, nms_radius,
                                refine_trajectory, smooth_trajectory, trajectories_from_json,
                                trajectories_to_json, trajectories_to_world)
from caspnet.raster import Frame


def pts(xy, prob=None, t=0):
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    prob = np.linspace(0.9, 0.5, len(xy)) if prob is None else prob
    return PointSet(t, xy, prob)


def test_grid_to_points_examples():
    probs = np.zeros((20, 20))
    off = np.zeros((2, 20, 20))
    assert len(grid_to_points(probs, off)) == 0
    probs[10, 10] = 0.9
    off[:, 10, 10] = (0.25, -0.25)
    ps = grid_to_points(probs, off)
    assert len(ps) == 1
    p = next(iter(ps))
    assert p.pos == (10.25, 9.75) and p.prob == 0.9
    probs[3, 4] = 0.4
    probs[5, 6] = 0.6
    assert len(grid_to_points(probs, off, threshold=0.5)) == 2
    assert len(grid_to_points(probs, off, threshold=0.65)) == 1


def test_grid_points_order_tie_break():
    probs = np.zeros((5, 5))
    probs[3, 1] = probs[1, 4] = probs[1, 2] = 0.5
    probs[4, 4] = 0.7
    ps = grid_to_points(probs, np.zeros((2, 5, 5)))
    assert ps.pix.tolist() == [[4, 4], [1, 2], [1, 4], [3, 1]]


def test_nms_examples():
    assert len(nms_modes(pts([[0, 0]]), 2.0)) == 1
    out = nms_modes(pts([[0, 0], [1, 0]], prob=[0.4, 0.8]).sorted(), 2.0)
    assert len(out) == 1 and out.prob[0] == 0.8


def brute_nms(pos, prob, radius, k):
    order = sorted(range(len(prob)), key=lambda i: -prob[i])
    keep = []
    for i in order:
        if all(np.hypot(*(pos[i] - pos[j])) > radius for j in keep):
            keep.append(i)
        if len(keep) == k:
            break
    return keep


def test_nms_bimodal_clusters(rng):
    a = rng.normal([10, 10], 0.5, size=(30, 2))
    b = rng.normal([10, 30], 0.5, size=(30, 2))
    pos = np.vstack([a, b])
    prob = np.concatenate([rng.uniform(0.6, 0.9, 30), rng.uniform(0.3, 0.6, 30)])
    ps = PointSet(0, pos, prob).sorted()
    out = nms_modes(ps, 5.0)
    assert len(out) == 2
    assert np.linalg.norm(out.pos[0] - [10, 10]) < 2 and np.linalg.norm(out.pos[1] - [10, 30]) < 2
    ref = brute_nms(ps.pos, ps.prob, 5.0, 5)
    np.testing.assert_array_equal(out.pos, ps.pos[ref])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 6.0))
def test_nms_matches_brute_force_and_spacing(seed, radius):
    r = np.random.default_rng(seed)
    ps = PointSet(0, r.uniform(0, 20, size=(25, 2)), r.uniform(0.05, 1, 25)).sorted()
    out = nms_modes(ps, radius)
    np.testing.assert_array_equal(out.pos, ps.pos[brute_nms(ps.pos, ps.prob, radius, 5)])
    for i, j in itertools.combinations(range(len(out)), 2):
        assert np.linalg.norm(out.pos[i] - out.pos[j]) >= radius


def test_nms_radius_dynamic():
    assert nms_radius(0.0) == 2.0
    assert nms_radius(10.0) == 5.0


def test_fps_examples(rng):
    sel = pts([[0, 0]])
    assert len(farthest_point_sampling(sel, sel)) == 0
    pool = pts([[0, 0], [1, 0], [10, 0]])
    assert farthest_point_sampling(pool, sel, k=1).pos[0].tolist() == [10, 0]
    with pytest.raises(ValueError):
        farthest_point_sampling(pool, pts(np.zeros((0, 2))))

    pool = PointSet(0, rng.uniform(0, 50, size=(50, 2)), rng.uniform(size=50)).sorted()
    chosen = pool.take([0])
    first = farthest_point_sampling(pool, chosen, k=1).pos[0]
    best = max(pool.pos, key=lambda p: min(np.linalg.norm(p - c) for c in chosen.pos))
    np.testing.assert_array_equal(first, best)


def test_fps_monotone_max_min(rng):
    pool = PointSet(0, rng.uniform(0, 30, size=(40, 2)), rng.uniform(size=40)).sorted()
    chosen = pool.take([0])
    added = farthest_point_sampling(pool, chosen, k=8)
    assert len(added) == 8
    prev = np.inf
    sel = list(chosen.pos)
    for p in added.pos:
        d = min(np.linalg.norm(p - s) for s in sel)
        assert d <= prev + 1e-12
        prev = d
        sel.append(p)


def test_fps_pool_exhausted():
    pool = pts([[0, 0], [3, 0]])
    assert len(farthest_point_sampling(pool, pool.take([0]), k=5)) == 1


def test_const_accel_examples():
    tr = const_accel_trajectory([0, 0], [2, 1], [24, 12], 12, 1.0)
    np.testing.assert_allclose(np.diff(tr, axis=0), [[2, 1]] * 11, atol=1e-12)
    tr = const_accel_trajectory([0, 0], [0, 0], [7.2, 0], 12, 0.5)
    assert tr[5, 0] == pytest.approx(0.5 * 0.4 * 3.0 ** 2, abs=1e-12)
    assert tr[5, 0] == pytest.approx(1.8, abs=1e-12)
    tr = const_accel_trajectory([3, 4], [0, 0], [3, 4], 12, 0.5)
    assert np.all(tr == [3, 4])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6), st.integers(1, 15))
def test_const_accel_hits_endpoint(vals, n):
    p0, v0, end = np.array(vals[:2]), np.array(vals[2:4]), np.array(vals[4:]) * 3
    tr = const_accel_trajectory(p0, v0, end, n, 0.5)
    assert np.linalg.norm(tr[-1] - end) < 1e-9


def test_refine_examples():
    init = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    empty = [pts(np.zeros((0, 2)), t=t) for t in range(3)]
    np.testing.assert_array_equal(refine_trajectory(init, empty), init)
    steps = [pts([[0.0, 0.5]]), pts([[1.0, 5.0]]), pts(np.zeros((0, 2)))]
    out = refine_trajectory(init, steps)
    np.testing.assert_array_equal(out, [[0, 0.5], [1, 0], [2, 0]])


def test_smooth_examples():
    line = np.stack([np.arange(6.0), 2 * np.arange(6.0)], axis=1)
    np.testing.assert_allclose(smooth_trajectory(line), line, atol=1e-12)
    zig = np.stack([np.arange(6.0), np.array([1, -1, 1, -1, 1, -1.0])], axis=1)
    sm = smooth_trajectory(zig)
    np.testing.assert_allclose(np.abs(sm[1:-1, 1]), 1 / 3, atol=1e-12)
    assert sm[0, 1] == 1 and sm[-1, 1] == -1
    two = np.array([[0.0, 1.0], [5.0, 2.0]])
    np.testing.assert_array_equal(smooth_trajectory(two), two)


def corridor_grids(n=12, shape=(152, 80), ends=((122 - 30, 40, 0.9),), spread=0.8, v0=(-5.0, 0.0), dt=0.5):
    """Per-step blobs on uniformly accelerated paths from the anchor (moving at v0) to each endpoint."""
    probs = np.zeros((n,) + shape)
    uu, vv = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    T = n * dt
    for eu, ev, peak in ends:
        au, av = 2 * (eu - 122 - v0[0] * T) / T ** 2, 2 * (ev - 40 - v0[1] * T) / T ** 2
        for t in range(n):
            s = (t + 1) * dt
            cu, cv = 122 + v0[0] * s + au * s * s / 2, 40 + v0[1] * s + av * s * s / 2
            probs[t] = np.maximum(probs[t], peak * np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2 * spread ** 2)))
    return probs, np.zeros((n, 2) + shape)


def test_extract_unimodal():
    probs, off = corridor_grids()
    trajs = extract_k_trajectories(probs, off, [122, 40], [-5, 0], k=10)
    assert trajs[0].mode_source == "nms"
    am = np.unravel_index(np.argmax(probs[-1]), probs.shape[1:])
    np.testing.assert_allclose(trajs[0].points[-1], am)
    assert trajs[0].prob == pytest.approx(probs[-1].max())
    assert all(t.prob <= trajs[0].prob for t in trajs)
    assert all(t.points.shape == (12, 2) for t in trajs)


def test_extract_prefix_and_determinism():
    probs, off = corridor_grids(ends=((92, 40, 0.9), (110, 10, 0.7)))
    k10 = extract_k_trajectories(probs, off, [122, 40], [-5, 0], k=10)
    k5 = extract_k_trajectories(probs, off, [122, 40], [-5, 0], k=5)
    k1 = extract_k_trajectories(probs, off, [122, 40], [-5, 0], k=1)
    assert len(k1) == 1 and len(k5) == 5 and 5 <= len(k10) <= 10
    for a, b in zip(k5, k10):
        np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(k1[0].points, k10[0].points)
    again = extract_k_trajectories(probs, off, [122, 40], [-5, 0], k=10)
    assert all(np.array_equal(a.points, b.points) and a.prob == b.prob for a, b in zip(k10, again))


def test_extract_bimodal_distinct_corridors():
    probs, off = corridor_grids(ends=((92, 40, 0.9), (110, 10, 0.8)))
    trajs = extract_k_trajectories(probs, off, [122, 40], [-5, 0], k=5)
    a, b = trajs[0].points, trajs[1].points
    assert np.linalg.norm(a[-1] - [92, 40]) < 1.0
    assert np.linalg.norm(b[-1] - [110, 10]) < 1.0
    # the middle of each trajectory follows its own corridor
    assert np.linalg.norm(a[5] - [122 - 15, 40]) < 1.5
    assert np.linalg.norm(b[5] - [111.5, 32.5]) < 1.5
    assert np.linalg.norm(a[5] - b[5]) > 5


def test_extract_empty_warns():
    with pytest.warns(RuntimeWarning):
        assert extract_k_trajectories(np.zeros((3, 8, 8)), np.zeros((3, 2, 8, 8)), [4, 4], [0, 0]) == []


def test_points_stay_in_roi():
    probs = np.zeros((12, 20, 10))
    probs[-1, 0, 0] = 0.9
    trajs = extract_k_trajectories(probs, np.zeros((12, 2, 20, 10)), [10, 5], [-40, 30], k=1)
    p = trajs[0].points
    assert p[:, 0].min() >= -0.5 and p[:, 0].max() <= 19.5
    assert p[:, 1].min() >= -0.5 and p[:, 1].max() <= 9.5


def test_json_round_trip_and_world():
    probs, off = corridor_grids()
    trajs = extract_k_trajectories(probs, off, [122, 40], [-5, 0], k=2)
    frame = Frame(10.0, -3.0, 0.7)
    text = trajectories_to_json(trajs, frame, 0.5)
    body = json.loads(text)
    assert body["trajectories"][0]["points"][-1]["t"] == 6.0
    back, fr, dt = trajectories_from_json(text)
    assert fr == frame and dt == 0.5
    np.testing.assert_array_equal(back[0].points, trajs[0].points)
    world = trajectories_to_world(trajs, frame)
    np.testing.assert_allclose(frame.to_grid(world[0]), trajs[0].points, atol=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        ExtractionConfig(threshold=0)
