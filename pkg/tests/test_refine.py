"""Closest-event search and silhouette ICP refinement."""

import numpy as np
import pytest

from evmocap.body import SkeletonPose
from evmocap.events import EventStream
from evmocap.refine import (Boundary, EventWindowIndex, RefineWeights,
                            closest_event, closest_events, extract_boundary,
                            refine_pose)


def brute_force_closest(s_b, stream, t_f, duration, weights):
    """Exhaustive transcription of the spatio-temporal distance argmin.

    Patch is the half-open square [int(x)-4, int(x)+4) x [int(y)-4, int(y)+4);
    ties broken by earlier timestamp, then by row-major scan order.
    """
    half = weights.patch_size // 2
    best, best_d, best_t = None, np.inf, None
    lo, hi = t_f - duration / 2.0, t_f + duration / 2.0
    x0, y0 = int(s_b[0]) - half, int(s_b[1]) - half
    W, H = stream.sensor_size
    for yy in range(max(0, y0), min(H, y0 + 2 * half)):
        for xx in range(max(0, x0), min(W, x0 + 2 * half)):
            for i in np.flatnonzero((stream.x == xx) & (stream.y == yy)):
                if not (lo <= stream.t[i] <= hi):
                    continue
                d = (weights.lambda_dist * ((t_f - stream.t[i]) / duration) ** 2
                     + (s_b[0] - xx) ** 2 + (s_b[1] - yy) ** 2)
                if d < best_d or (d == best_d and stream.t[i] < best_t):
                    best, best_d, best_t = i, d, stream.t[i]
    return best


def random_stream(rng, n=200, W=48, H=36, t_max=40000):
    t = np.sort(rng.integers(0, t_max, n))
    x = rng.integers(0, W, n).astype(np.int32)
    y = rng.integers(0, H, n).astype(np.int32)
    p = rng.choice([-1, 1], n).astype(np.int8)
    return EventStream(t.astype(np.int64), x, y, p, (W, H))


def test_closest_event_matches_brute_force(rng):
    weights = RefineWeights()
    agree = 0
    n_windows = 200
    for _ in range(n_windows):
        stream = random_stream(rng)
        s_b = rng.uniform([2, 2], [45, 33])
        t_f = int(rng.integers(5000, 35000))
        dur = int(rng.integers(5000, 40000))
        got = closest_event(s_b, stream, t_f, dur, weights)
        want = brute_force_closest(s_b, stream, t_f, dur, weights)
        assert got == want
        agree += 1
    assert agree == n_windows


def test_closest_event_tie_break_earlier_time():
    # two events equidistant in space and time around t_f: earlier wins
    weights = RefineWeights()
    stream = EventStream(np.array([900, 1100]), np.array([10, 10], np.int32),
                         np.array([12, 12], np.int32),
                         np.array([1, 1], np.int8), (48, 36))
    got = closest_event((10.0, 12.0), stream, 1000, 2000, weights)
    assert got == 0


def test_closest_event_tie_break_row_major():
    # same timestamp, symmetric spatial offsets: row-major pixel order wins
    weights = RefineWeights()
    stream = EventStream(np.array([1000, 1000]), np.array([11, 9], np.int32),
                         np.array([12, 12], np.int32),
                         np.array([1, 1], np.int8), (48, 36))
    got = closest_event((10.0, 12.0), stream, 1000, 2000, weights)
    assert stream.x[got] == 9


def test_closest_event_none_outside_patch():
    weights = RefineWeights()
    stream = EventStream(np.array([1000]), np.array([40], np.int32),
                         np.array([30], np.int32), np.array([1], np.int8),
                         (48, 36))
    assert closest_event((5.0, 5.0), stream, 1000, 2000, weights) is None


def test_closest_events_empty_boundary(rng):
    stream = random_stream(rng)
    idx = EventWindowIndex(stream, 0, 40000)
    bnd = Boundary(np.zeros((0, 2)), np.zeros((0, 2)),
                   np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    out = closest_events(bnd, idx, 20000, 40000, RefineWeights())
    assert len(out) == 0


def silhouette_event_stream(model, mesh, intrinsics, pose, t_f, rng):
    """Events scattered on the true silhouette around t_f."""
    bnd = extract_boundary(model, mesh, SkeletonPose.from_vector(pose), intrinsics)
    n = len(bnd)
    reps = 3
    xs = np.tile(bnd.positions[:, 0].astype(np.int32), reps)
    ys = np.tile(bnd.positions[:, 1].astype(np.int32), reps)
    # distinct per-pixel timestamps spread around t_f
    t = np.concatenate([np.full(n, t_f + (r - 1) * 1000) + np.arange(n)
                        for r in range(reps)]).astype(np.int64)
    p = rng.choice([-1, 1], n * reps).astype(np.int8)
    order = np.argsort(t, kind="stable")
    return EventStream(t[order], xs[order], ys[order], p[order],
                       intrinsics.sensor_size)


def mean_boundary_event_distance(model, mesh, intrinsics, pose, stream, t_f,
                                 duration, weights):
    bnd = extract_boundary(model, mesh, SkeletonPose.from_vector(pose), intrinsics)
    idx = EventWindowIndex(stream, t_f - duration / 2, t_f + duration / 2)
    ev = closest_events(bnd, idx, t_f, duration, weights)
    keep = ev >= 0
    d = np.hypot(stream.x[ev[keep]] - bnd.positions[keep, 0],
                 stream.y[ev[keep]] - bnd.positions[keep, 1])
    return d.mean() if keep.any() else np.inf


def test_refine_recovers_silhouette_offset(model, mesh, intrinsics, rng):
    # ground-truth silhouette events; pose shifted ~3 px laterally
    pose = SkeletonPose.identity().as_vector()
    pose[-1] = 2.8
    t_f = 20000
    stream = silhouette_event_stream(model, mesh, intrinsics, pose, t_f, rng)
    off = pose.copy()
    off[-3] += 3.0 * 2.8 / intrinsics.focal[0]   # ~3 px at that depth
    w = RefineWeights()
    d0 = mean_boundary_event_distance(model, mesh, intrinsics, off, stream,
                                      t_f, 40000, w)
    new, rep = refine_pose(off, stream, model, mesh, intrinsics, t_f,
                           (0, 40000), w)
    d1 = mean_boundary_event_distance(model, mesh, intrinsics, new, stream,
                                      t_f, 40000, w)
    assert not rep.skipped
    assert d1 <= 0.5 * d0


def test_refine_noop_when_silhouette_disabled(model, mesh, intrinsics, rng):
    pose = SkeletonPose.identity().as_vector()
    pose[-1] = 2.8
    stream = silhouette_event_stream(model, mesh, intrinsics, pose, 1000, rng)
    w = RefineWeights(lambda_sil=0.0)
    new, rep = refine_pose(pose, stream, model, mesh, intrinsics, 1000,
                           (0, 2000), w)
    assert rep.skipped
    assert np.array_equal(new, pose)


def test_refine_respects_joint_limits(model, mesh, intrinsics, rng):
    pose = SkeletonPose.identity().as_vector()
    pose[-1] = 2.8
    stream = silhouette_event_stream(model, mesh, intrinsics, pose, 1000, rng)
    new, _ = refine_pose(pose, stream, model, mesh, intrinsics, 1000,
                         (0, 2000), RefineWeights())
    theta = new[:len(model.angle_lower)]
    assert np.all(theta >= model.angle_lower - 1e-12)
    assert np.all(theta <= model.angle_upper + 1e-12)
