"""Continuous 2D event-feature trajectories between adjacent intensity
frames, and their slicing into per-tracking-frame correspondences.

Features are seeded on the sharpened latent image and tracked by
registering a fixed gradient-magnitude template against event-count
frames accumulated over fixed-size event windows, forward from the start
latent and backward from the end latent.  The two passes are stitched at
the batch midpoint, each stitched track is fit with a least-squares cubic
B-spline, and the splines are sampled at the tracking-frame timestamps.

No RNG anywhere: identical inputs give identical trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.interpolate import BSpline, make_lsq_spline

from .events import EventStream, LatentImage

STITCH_THRESHOLD_PX = 4.0   # max midpoint gap for forward/backward stitching
UNSTITCHED_WEIGHT = 0.5     # residual down-weight for forward-only tracks


@dataclass
class TrackerConfig:
    max_features: int = 150
    patch_size: int = 15
    window_events: int = 800
    search_radius: int = 3
    min_correlation: float = 0.3
    min_spacing: float = 6.0
    min_window_activity: float = 20.0   # events inside the search region


@dataclass
class FeatureTrack:
    feature_id: int
    times: np.ndarray       # (K,) int us, strictly increasing
    positions: np.ndarray   # (K,2) subpixel
    direction: str          # "forward" | "backward"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if len(self.times) >= 2 and np.any(np.diff(self.times) <= 0):
            raise ValueError("track timestamps must be strictly increasing")

    def position_at(self, t_us):
        """Linear interpolation, None outside the sampled span."""
        if len(self.times) == 0 or t_us < self.times[0] or t_us > self.times[-1]:
            return None
        x = np.interp(t_us, self.times, self.positions[:, 0])
        y = np.interp(t_us, self.times, self.positions[:, 1])
        return np.array([x, y])


@dataclass
class FeatureTrajectory:
    feature_id: int
    valid_interval: tuple       # (t0_us, t1_us)
    stitched: bool
    rms_residual: float
    _eval: object = field(repr=False)   # callable t_us -> (...,2)
    control_points: np.ndarray | None = None
    knots: np.ndarray | None = None

    def evaluate(self, t_us):
        t = np.asarray(t_us, dtype=np.float64)
        lo, hi = self.valid_interval
        if np.any(t < lo - 0.5) or np.any(t > hi + 0.5):
            raise ValueError("evaluation outside the trajectory's valid interval")
        return self._eval(np.clip(t, lo, hi))


def detect_features(latent: LatentImage, max_features: int,
                    min_spacing: float = 8.0) -> np.ndarray:
    """Min-eigenvalue corners on the latent image, NMS by min_spacing. (K,2)."""
    if max_features <= 0:
        return np.zeros((0, 2))
    img = latent.log_pixels.astype(np.float32)
    rng_ = img.max() - img.min()
    if rng_ < 1e-9:
        return np.zeros((0, 2))
    img = (img - img.min()) / rng_
    pts = cv2.goodFeaturesToTrack(img, maxCorners=int(max_features),
                                  qualityLevel=0.01, minDistance=float(min_spacing),
                                  blockSize=5, useHarrisDetector=False)
    if pts is None:
        return np.zeros((0, 2))
    pts = pts.reshape(-1, 2).astype(np.float64)
    # deterministic order: by (y, x)
    return pts[np.lexsort((pts[:, 0], pts[:, 1]))]


def _gradient_template(latent: LatentImage, pos, patch: int):
    half = patch // 2
    gy, gx = np.gradient(latent.log_pixels)
    mag = np.hypot(gx, gy).astype(np.float32)
    x, y = int(round(pos[0])), int(round(pos[1]))
    H, W = mag.shape
    if x - half < 0 or y - half < 0 or x + half >= W or y + half >= H:
        return None
    return mag[y - half:y + half + 1, x - half:x + half + 1].copy()


def _event_windows(stream: EventStream, reverse: bool, n_events: int):
    """Index ranges of fixed-event-count windows, chunked from the traversal
    start (stream start forward, stream end backward)."""
    n = len(stream)
    if n == 0:
        return []
    edges = []
    if not reverse:
        starts = range(0, n, n_events)
        for s in starts:
            edges.append((s, min(s + n_events, n)))
    else:
        e = n
        while e > 0:
            s = max(0, e - n_events)
            edges.append((s, e))
            e = s
    return edges


def _register(template, frame, pos, cfg: TrackerConfig):
    """NCC registration of the template around pos; returns (new_pos, peak)."""
    patch = template.shape[0]
    half = patch // 2
    r = cfg.search_radius
    H, W = frame.shape
    x, y = int(round(pos[0])), int(round(pos[1]))
    x0, y0 = x - half - r, y - half - r
    x1, y1 = x + half + r + 1, y + half + r + 1
    if x0 < 0 or y0 < 0 or x1 > W or y1 > H:
        return None, 0.0
    region = frame[y0:y1, x0:x1]
    if region.sum() < cfg.min_window_activity:
        return pos, None   # too little event activity: hold position
    res = cv2.matchTemplate(region, template, cv2.TM_CCOEFF_NORMED)
    _, peak, _, loc = cv2.minMaxLoc(res)
    px, py = loc
    # subpixel parabola fit around the integer peak
    dx = dy = 0.0
    if 0 < px < res.shape[1] - 1:
        l, c_, r_ = res[py, px - 1], res[py, px], res[py, px + 1]
        den = l - 2 * c_ + r_
        if abs(den) > 1e-12:
            dx = float(np.clip(0.5 * (l - r_) / den, -0.5, 0.5))
    if 0 < py < res.shape[0] - 1:
        u, c_, d_ = res[py - 1, px], res[py, px], res[py + 1, px]
        den = u - 2 * c_ + d_
        if abs(den) > 1e-12:
            dy = float(np.clip(0.5 * (u - d_) / den, -0.5, 0.5))
    new = np.array([x0 + px + dx + half, y0 + py + dy + half])
    return new, float(peak)


def track_features(seeds: np.ndarray, stream: EventStream, latent_start: LatentImage,
                   direction: str = "forward",
                   cfg: TrackerConfig | None = None) -> list[FeatureTrack]:
    """Track seed points through the event stream via template registration.

    Seeds come from ``latent_start``; a track's first sample is its seed at
    the latent's timestamp.  Lost tracks are simply shorter.
    """
    cfg = cfg or TrackerConfig()
    reverse = direction == "backward"
    t_seed = int(round(latent_start.timestamp * 1e6))

    templates, states = [], []
    for fid, s in enumerate(seeds):
        tpl = _gradient_template(latent_start, s, cfg.patch_size)
        templates.append(tpl)
        states.append({
            "id": fid, "pos": np.asarray(s, dtype=np.float64), "alive": tpl is not None,
            "times": [t_seed], "positions": [np.asarray(s, dtype=np.float64)],
        })

    W, H = stream.sensor_size
    for s_i, e_i in _event_windows(stream, reverse, cfg.window_events):
        acc = np.zeros((H, W), dtype=np.float32)
        np.add.at(acc, (stream.y[s_i:e_i], stream.x[s_i:e_i]), 1.0)
        frame = cv2.GaussianBlur(acc, (5, 5), 1.0)
        t_mid = int((stream.t[s_i] + stream.t[e_i - 1]) // 2)
        for st, tpl in zip(states, templates):
            if not st["alive"] or tpl is None:
                continue
            new, peak = _register(tpl, frame, st["pos"], cfg)
            if new is None:
                st["alive"] = False
                continue
            if peak is None:
                continue   # inactive window, hold
            if peak < cfg.min_correlation:
                st["alive"] = False
                continue
            st["pos"] = np.clip(new, [0, 0], [W - 1, H - 1])
            st["times"].append(t_mid)
            st["positions"].append(st["pos"].copy())

    tracks = []
    for st in states:
        t = np.array(st["times"], dtype=np.int64)
        p = np.array(st["positions"])
        if reverse:
            t, p = t[::-1], p[::-1]
        # drop duplicate timestamps (can occur at window boundaries)
        keep = np.r_[True, np.diff(t) > 0]
        tracks.append(FeatureTrack(st["id"], t[keep], p[keep], direction))
    return tracks


def stitch_bidirectional(forward: list[FeatureTrack], backward: list[FeatureTrack],
                         t_mid: int):
    """Greedy nearest association of forward and backward tracks at t_mid.

    Pairs farther than STITCH_THRESHOLD_PX are left unstitched; unmatched
    forward tracks are retained with stitched=False.  Returns a list of
    (track, stitched flag).
    """
    f_pos = [tr.position_at(t_mid) for tr in forward]
    b_pos = [tr.position_at(t_mid) for tr in backward]
    cands = []
    for i, fp in enumerate(f_pos):
        if fp is None:
            continue
        for j, bp in enumerate(b_pos):
            if bp is None:
                continue
            d = float(np.linalg.norm(fp - bp))
            if d <= STITCH_THRESHOLD_PX:
                cands.append((d, i, j))
    cands.sort()
    used_f, used_b = set(), set()
    pairs = {}
    for d, i, j in cands:
        if i in used_f or j in used_b:
            continue
        used_f.add(i)
        used_b.add(j)
        pairs[i] = j

    out = []
    for i, tr in enumerate(forward):
        if i in pairs:
            bt = backward[pairs[i]]
            # Each direction is most accurate near its own seed frame and
            # drifts toward the far end, so blend with time-linear weights
            # instead of hard-switching at t_mid: the merged track stays
            # pinned to the seed positions at both batch endpoints.
            lo = max(tr.times[0], bt.times[0])
            hi = min(tr.times[-1], bt.times[-1])
            t = np.unique(np.concatenate([tr.times, bt.times]))
            fp = np.stack([np.interp(t, tr.times, tr.positions[:, 0]),
                           np.interp(t, tr.times, tr.positions[:, 1])], axis=1)
            bp = np.stack([np.interp(t, bt.times, bt.positions[:, 0]),
                           np.interp(t, bt.times, bt.positions[:, 1])], axis=1)
            span = max(hi - lo, 1)
            w_b = np.clip((t - lo) / span, 0.0, 1.0)[:, None]
            p = np.where(t[:, None] < lo, fp,
                         np.where(t[:, None] > hi, bp,
                                  (1.0 - w_b) * fp + w_b * bp))
            merged = FeatureTrack(tr.feature_id, t, p, "forward")
            out.append((merged, True))
        else:
            out.append((tr, False))
    return out


def fit_spline(track: FeatureTrack, stitched: bool = True) -> FeatureTrajectory:
    """Least-squares cubic B-spline over the track samples.

    Uniform knots, one control point per 5 samples (min 4); tracks with
    fewer than 4 samples fall back to piecewise-linear interpolation.
    """
    t = track.times.astype(np.float64)
    p = track.positions
    if len(t) < 2 or t[-1] <= t[0]:
        raise ValueError("degenerate track: need samples spanning a time interval")
    interval = (int(track.times[0]), int(track.times[-1]))

    if len(t) < 4:
        def lin(tq, t=t, p=p):
            tq = np.asarray(tq, dtype=np.float64)
            return np.stack([np.interp(tq, t, p[:, 0]),
                             np.interp(tq, t, p[:, 1])], axis=-1)
        res = lin(t) - p
        rms = float(np.sqrt(np.mean(np.sum(res**2, axis=1)))) if len(t) else 0.0
        return FeatureTrajectory(track.feature_id, interval, stitched, rms, lin)

    n_ctrl = max(4, len(t) // 5)
    k = 3
    while n_ctrl >= 4:
        inner = np.linspace(t[0], t[-1], n_ctrl - k + 1)[1:-1]
        knots = np.r_[[t[0]] * (k + 1), inner, [t[-1]] * (k + 1)]
        try:
            spl = make_lsq_spline(t, p, knots, k=k)
            break
        except Exception:
            n_ctrl -= 1
    else:
        def lin(tq, t=t, p=p):
            tq = np.asarray(tq, dtype=np.float64)
            return np.stack([np.interp(tq, t, p[:, 0]),
                             np.interp(tq, t, p[:, 1])], axis=-1)
        res = lin(t) - p
        rms = float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
        return FeatureTrajectory(track.feature_id, interval, stitched, rms, lin)

    def ev(tq, spl=spl):
        return np.asarray(spl(np.asarray(tq, dtype=np.float64)))

    res = ev(t) - p
    rms = float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
    return FeatureTrajectory(track.feature_id, interval, stitched, rms, ev,
                             control_points=np.asarray(spl.c), knots=np.asarray(spl.t))


@dataclass
class CorrespondenceSet:
    """Event correspondences of an interior tracking frame to one neighbor."""
    frame_index: int
    neighbor_index: int
    feature_ids: np.ndarray     # (K,)
    p_i: np.ndarray             # (K,2) pixel at frame_index
    p_j: np.ndarray             # (K,2) pixel at neighbor_index
    pair_weight: np.ndarray     # (K,) 1.0 stitched / 0.5 forward-only
    anchor_valid: np.ndarray | None = None   # tau flags (bound per batch)
    anchor_vertices: np.ndarray | None = None  # (K,3) vertex ids
    anchor_bary: np.ndarray | None = None      # (K,3)


def slice_trajectories(trajectories: list[FeatureTrajectory], t_k: int, t_k1: int,
                       n_frames: int, sensor_size):
    """Sample trajectories at N+1 evenly spaced tracking-frame timestamps.

    Returns (frame_times (N+1,), positions (N+1,H,2), valid (N+1,H),
    correspondence sets for every interior frame i and j in {i-1, i+1}).
    """
    if n_frames < 2:
        raise ValueError("need at least 2 tracking frames per batch")
    N = n_frames
    f = np.arange(N + 1)
    frame_times = t_k + np.rint(f * (t_k1 - t_k) / N).astype(np.int64)
    W, H = sensor_size

    nT = len(trajectories)
    positions = np.full((N + 1, nT, 2), np.nan)
    valid = np.zeros((N + 1, nT), dtype=bool)
    weights = np.ones(nT)
    for h, traj in enumerate(trajectories):
        lo, hi = traj.valid_interval
        ok = (frame_times >= lo) & (frame_times <= hi)
        if not np.any(ok):
            continue
        pts = traj.evaluate(frame_times[ok])
        inb = (pts[:, 0] >= 0) & (pts[:, 0] <= W - 1) & \
              (pts[:, 1] >= 0) & (pts[:, 1] <= H - 1)
        sel = np.flatnonzero(ok)[inb]
        positions[sel, h] = pts[inb]
        valid[sel, h] = True
        weights[h] = 1.0 if traj.stitched else UNSTITCHED_WEIGHT

    corr = []
    for i in range(1, N):
        for j in (i - 1, i + 1):
            both = valid[i] & valid[j]
            ids = np.flatnonzero(both)
            corr.append(CorrespondenceSet(
                frame_index=i, neighbor_index=j,
                feature_ids=ids,
                p_i=positions[i, ids].copy(),
                p_j=positions[j, ids].copy(),
                pair_weight=weights[ids].copy(),
            ))
    return frame_times, positions, valid, corr


def dump_trajectories(path, trajectories: list[FeatureTrajectory]):
    """Debug JSON dump of spline control data for plotting."""
    doc = []
    for tr in trajectories:
        doc.append({
            "feature_id": int(tr.feature_id),
            "valid_interval": [int(tr.valid_interval[0]), int(tr.valid_interval[1])],
            "stitched": bool(tr.stitched),
            "rms_residual": tr.rms_residual,
            "control_points": None if tr.control_points is None else tr.control_points.tolist(),
            "knots": None if tr.knots is None else tr.knots.tolist(),
        })
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
