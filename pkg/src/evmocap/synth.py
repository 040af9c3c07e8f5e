"""Synthetic benchmark generation and pose-accuracy evaluation.

Renders a moving body over a textured background into a dense latent
log-brightness sequence, runs the event-camera forward model to get an
event stream plus low-rate intensity frames, and fabricates noisy joint
detections from the ground-truth motion.  Evaluation aligns estimated
joints to ground truth per frame (rigid Procrustes, no scale) and reports
the average joint error in millimeters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .batch import DetectionSet, save_detections
from .body import (BodyMesh, CameraIntrinsics, FKResult, SkeletonModel,
                   SkeletonPose, default_intrinsics, default_mesh,
                   default_skeleton, project, save_model, skin_points)
from .events import (EventCameraConfig, EventSimulator, save_events,
                     save_intensity_frame)
from .raster import rasterize


# ---------------------------------------------------------------------------
# motion clips
# ---------------------------------------------------------------------------

@dataclass
class MotionClip:
    """Densely sampled ground-truth pose track, linearly interpolated."""
    timestamps_us: np.ndarray   # (M,) strictly increasing
    poses: np.ndarray           # (M, 33)

    def __post_init__(self):
        self.timestamps_us = np.asarray(self.timestamps_us, dtype=np.int64)
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if len(self.timestamps_us) < 2 or np.any(np.diff(self.timestamps_us) <= 0):
            raise ValueError("clip needs >= 2 strictly increasing samples")

    def pose_at(self, t_us) -> np.ndarray:
        t = np.clip(t_us, self.timestamps_us[0], self.timestamps_us[-1])
        i = np.searchsorted(self.timestamps_us, t, side="right") - 1
        i = min(int(i), len(self.timestamps_us) - 2)
        t0, t1 = self.timestamps_us[i], self.timestamps_us[i + 1]
        a = (t - t0) / (t1 - t0)
        return (1 - a) * self.poses[i] + a * self.poses[i + 1]

    @property
    def duration_us(self) -> int:
        return int(self.timestamps_us[-1] - self.timestamps_us[0])


def save_clip(path, clip: MotionClip):
    with open(path, "w") as f:
        json.dump({"timestamps_us": clip.timestamps_us.tolist(),
                   "poses": clip.poses.tolist()}, f)


def load_clip(path) -> MotionClip:
    with open(path) as f:
        doc = json.load(f)
    return MotionClip(np.array(doc["timestamps_us"]), np.array(doc["poses"]))


def benchmark_clip(model: SkeletonModel, duration_s: float = 2.0,
                   sample_rate_hz: float = 2000.0,
                   depth_m: float = 2.8) -> MotionClip:
    """Fast arm swings plus a vertical bounce; deliberately nonlinear
    within a 40 ms window so interpolation-only baselines lag behind."""
    n = int(round(duration_s * sample_rate_hz)) + 1
    t = np.linspace(0.0, duration_s, n)
    poses = np.zeros((n, 33))
    th = poses[:, :27]
    swing = 3.0                            # arm swing frequency, Hz
    th[:, 21] = 0.9 * np.sin(2 * np.pi * swing * t)            # l_shoulder z
    th[:, 25] = -0.9 * np.sin(2 * np.pi * swing * t + np.pi)   # r_shoulder z
    th[:, 19] = 0.35 * np.sin(2 * np.pi * swing * t + 0.7)     # l_shoulder x
    th[:, 23] = 0.35 * np.sin(2 * np.pi * swing * t + 2.3)     # r_shoulder x
    th[:, 22] = 0.7 + 0.6 * np.sin(2 * np.pi * swing * t + 1.1)   # l_elbow
    th[:, 26] = -0.7 - 0.6 * np.sin(2 * np.pi * swing * t + 4.2)  # r_elbow
    th[:, 12] = 0.3 + 0.25 * np.sin(2 * np.pi * 1.2 * t)       # knees / bounce
    th[:, 17] = 0.3 + 0.25 * np.sin(2 * np.pi * 1.2 * t + 0.3)
    th[:, 1] = 0.15 * np.sin(2 * np.pi * 0.5 * t)              # spine y sway
    poses[:, :27] = np.clip(th, model.angle_lower, model.angle_upper)
    poses[:, 28] = 0.25 * np.sin(2 * np.pi * 0.5 * t)          # root yaw
    poses[:, 30] = 0.06 * np.sin(2 * np.pi * 0.5 * t)          # sway x
    # slow bounce: the root barely translates within one 40 ms batch, so a
    # single per-batch auxiliary translation can represent both endpoints
    poses[:, 31] = -0.05 * np.abs(np.sin(2 * np.pi * 1.2 * t))  # bounce (y down)
    poses[:, 32] = depth_m
    return MotionClip(np.rint(t * 1e6).astype(np.int64), poses)


# ---------------------------------------------------------------------------
# scene rendering
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    """Static textured background plus per-face body albedo."""
    background_log: np.ndarray    # (H,W) log-DN
    face_albedo: np.ndarray       # (F,)
    light: np.ndarray             # (3,) unit direction toward the light
    body_dn: float = 30000.0


def build_scene(mesh: BodyMesh, intrinsics: CameraIntrinsics, seed: int = 0) -> Scene:
    rng = np.random.default_rng(seed)
    W, H = intrinsics.sensor_size
    yy, xx = np.mgrid[0:H, 0:W]
    checker = ((xx // 12 + yy // 12) % 2).astype(np.float64)
    noise = cv2.GaussianBlur(rng.standard_normal((H, W)), (0, 0), 4.0)
    noise /= max(np.abs(noise).max(), 1e-9)
    bg = 0.5 + 0.06 * (checker - 0.5) + 0.04 * noise
    # flat per-face albedo: facet edges give the tracker dense, strong
    # corners on the body itself rather than only on the background
    albedo = 0.55 + 0.40 * rng.uniform(-1, 1, size=len(mesh.faces))
    light = np.array([-0.3, -0.5, -0.8])
    return Scene(np.log(12000.0 * bg), albedo, light / np.linalg.norm(light))


def render_latent(model: SkeletonModel, mesh: BodyMesh,
                  intrinsics: CameraIntrinsics, pose_vec: np.ndarray,
                  scene: Scene) -> np.ndarray:
    """Log-brightness image: diffuse-shaded body composited over background."""
    pose = SkeletonPose.from_vector(pose_vec)
    verts = skin_points(FKResult(model, pose), mesh.vertices, mesh.skinning_weights)
    rr = rasterize(verts, mesh.faces, intrinsics)
    out = scene.background_log.copy()
    ys, xs = np.nonzero(rr.mask)
    if len(ys) == 0:
        return out
    fid = rr.face_id[ys, xs]
    tri = mesh.faces[fid]
    e1 = verts[tri[:, 1]] - verts[tri[:, 0]]
    e2 = verts[tri[:, 2]] - verts[tri[:, 0]]
    n = np.cross(e1, e2)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    lamb = np.abs(n @ scene.light)
    alb = scene.face_albedo[fid]
    shade = alb * (0.30 + 0.70 * lamb)
    out[ys, xs] = np.log(np.maximum(scene.body_dn * shade, 1.0))
    return out


# ---------------------------------------------------------------------------
# synthetic detections
# ---------------------------------------------------------------------------

@dataclass
class DetectorNoise:
    sigma_2d_px: float = 2.0
    sigma_3d_m: float = 0.020
    dropout: float = 0.05
    # image-plane blur (joint speed x exposure) degrading the simulated
    # frame-based detector; at blur_scale_px of blur the 2D sigma doubles,
    # confidence halves and the dropout rate doubles.  Zero motion reduces
    # to the plain (sigma, dropout) model.
    blur_scale_px: float = 1.0


def synthesize_detections(model: SkeletonModel, intrinsics: CameraIntrinsics,
                          clip: MotionClip, frame_times_us,
                          noise: DetectorNoise, seed: int,
                          exposure_s: float = 0.0) -> list[DetectionSet]:
    """Ground truth plus a frame-detector error model.

    Joints that sweep many pixels during the exposure come back with larger
    2D error, lower confidence and a higher chance of being dropped -- the
    regime the event stream is meant to cover.
    """
    rng = np.random.default_rng(seed)
    out = []
    nj = model.n_joints
    for t in frame_times_us:
        fk = FKResult(model, SkeletonPose.from_vector(clip.pose_at(int(t))))
        lms = fk.landmarks()
        uv = project(intrinsics, lms)
        if exposure_s > 0:
            dt = 0.5e6 * exposure_s
            fa = FKResult(model, SkeletonPose.from_vector(clip.pose_at(int(t) - dt)))
            fb = FKResult(model, SkeletonPose.from_vector(clip.pose_at(int(t) + dt)))
            blur = np.linalg.norm(project(intrinsics, fb.landmarks())
                                  - project(intrinsics, fa.landmarks()), axis=1)
        else:
            blur = np.zeros(len(lms))
        scale = 1.0 + blur / noise.blur_scale_px
        uv = uv + rng.normal(0, 1.0, uv.shape) * (noise.sigma_2d_px * scale)[:, None]
        conf = 1.0 / scale
        j2 = np.concatenate([uv, conf[:, None]], axis=1)
        rel = fk.pos - fk.pos[0] + rng.normal(0, noise.sigma_3d_m, (nj, 3))
        j3 = np.concatenate([rel, conf[:nj, None]], axis=1)
        drop2 = rng.random(len(uv)) < np.minimum(0.6, noise.dropout * scale)
        drop3 = rng.random(nj) < np.minimum(0.6, noise.dropout * scale[:nj])
        j2[drop2] = np.nan
        j2[drop2, 2] = 0.0
        j3[drop3] = np.nan
        j3[drop3, 3] = 0.0
        out.append(DetectionSet(int(t), j2, j3))
    return out


# ---------------------------------------------------------------------------
# dataset synthesis (streaming; one latent frame in memory at a time)
# ---------------------------------------------------------------------------

def synthesize_dataset(out_dir, seed: int = 0, duration_s: float = 2.0,
                       intensity_fps: float = 25.0, sim_rate_hz: float = 2000.0,
                       contrast_threshold: float = 0.35,
                       noise: DetectorNoise | None = None,
                       progress=None) -> dict:
    """Write a complete capture dataset; returns the meta dict.

    Layout: events.evb, frames/frame_NNNN.png(+.json), detections.json,
    model.json, ground_truth.json, meta.json.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    model = default_skeleton()
    mesh = default_mesh(model)
    intr = default_intrinsics()
    exposure = 0.004
    # extend by one exposure so frame centers land exactly on multiples of
    # the frame period: a 2 s / 25 fps clip yields 51 frames -> 50 batches
    clip = benchmark_clip(model, duration_s + exposure)
    scene = build_scene(mesh, intr, seed)
    cfg = EventCameraConfig(contrast_threshold=contrast_threshold,
                            exposure=exposure, intensity_fps=intensity_fps,
                            sensor_size=intr.sensor_size)
    sim = EventSimulator(cfg)
    n_steps = int(round((duration_s + exposure) * sim_rate_hz))
    for k in range(n_steps + 1):
        t_us = int(round(k * 1e6 / sim_rate_hz))
        sim.feed(t_us, render_latent(model, mesh, intr, clip.pose_at(t_us), scene))
        if progress and k % 400 == 0:
            progress(k, n_steps + 1)
    stream, frames = sim.finish()

    save_events(out / "events.evb", stream)
    frame_times = []
    for i, fr in enumerate(frames):
        save_intensity_frame(out / "frames" / f"frame_{i:04d}.png", fr)
        frame_times.append(int(round(fr.center_timestamp * 1e6)))
    dets = synthesize_detections(model, intr, clip, frame_times,
                                 noise or DetectorNoise(), seed + 1,
                                 exposure_s=exposure)
    save_detections(out / "detections.json", dets)
    save_model(out / "model.json", model, mesh, intr)
    save_clip(out / "ground_truth.json", clip)
    meta = {
        "sensor_size": list(intr.sensor_size),
        "contrast_threshold": contrast_threshold,
        "intensity_fps": intensity_fps,
        "exposure_us": int(cfg.exposure * 1e6),
        "duration_us": clip.duration_us,
        "n_events": len(stream),
        "n_frames": len(frames),
        "seed": seed,
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return meta


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Rigid (rotation + translation, no scale) alignment of pred onto gt."""
    mp, mg = pred.mean(axis=0), gt.mean(axis=0)
    A = (gt - mg).T @ (pred - mp)
    U, _, Vt = np.linalg.svd(A)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ S @ Vt
    return (pred - mp) @ R.T + mg


@dataclass
class EvalReport:
    frame_times_us: np.ndarray
    per_frame_ae_mm: np.ndarray
    mean_ae_mm: float
    std_ae_mm: float
    data_bytes: int = 0
    bytes_per_second: float = 0.0

    def to_dict(self):
        return {
            "mean_ae_mm": self.mean_ae_mm,
            "std_ae_mm": self.std_ae_mm,
            "n_eval_frames": int(len(self.frame_times_us)),
            "data_bytes": int(self.data_bytes),
            "bytes_per_second": self.bytes_per_second,
        }


def evaluate(timestamps_us, poses, clip: MotionClip, model: SkeletonModel,
             stride: int = 10, data_bytes: int = 0) -> EvalReport:
    """Procrustes-aligned average joint error on every stride-th frame."""
    timestamps_us = np.asarray(timestamps_us)
    poses = np.asarray(poses)
    idx = np.arange(0, len(timestamps_us), stride)
    errs, times = [], []
    for i in idx:
        t = int(timestamps_us[i])
        jp = FKResult(model, SkeletonPose.from_vector(poses[i])).pos
        jg = FKResult(model, SkeletonPose.from_vector(clip.pose_at(t))).pos
        aligned = procrustes_align(jp, jg)
        errs.append(np.linalg.norm(aligned - jg, axis=1).mean() * 1000.0)
        times.append(t)
    errs = np.asarray(errs)
    dur = max((timestamps_us[-1] - timestamps_us[0]) * 1e-6, 1e-9)
    return EvalReport(np.asarray(times), errs, float(errs.mean()),
                      float(errs.std()), data_bytes, data_bytes / dur)


def dataset_byte_size(data_dir) -> int:
    """Bytes of the event stream plus intensity frames (input payload)."""
    d = Path(data_dir)
    total = os.path.getsize(d / "events.evb")
    for p in sorted((d / "frames").glob("frame_*.png")):
        total += os.path.getsize(p)
    return total


def format_comparison(rows: dict[str, EvalReport]) -> str:
    lines = [f"{'method':<14} {'AE mm':>8} {'STD mm':>8} {'frames':>7}"]
    for name, rep in rows.items():
        lines.append(f"{name:<14} {rep.mean_ae_mm:8.1f} {rep.std_ae_mm:8.1f} "
                     f"{len(rep.frame_times_us):7d}")
    return "\n".join(lines)
