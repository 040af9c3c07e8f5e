"""End-to-end capture orchestration.

Consumes a dataset directory (events + intensity frames + joint detections
+ body model), runs per-batch trajectory tracking, batch pose optimization
and event-based refinement, and emits one pose per tracking frame.  Only
one batch worth of events and images is processed at a time.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import batch as batch_mod
from . import refine as refine_mod
from . import solver, trajectories
from .batch import (AnchorSet, Batch, DetectionSet, EnergyWeights,
                    bind_anchor_pairs, initialize_batch, load_detections,
                    optimize_batch)
from .body import (POSE_DIM, CameraIntrinsics, FKResult, SkeletonModel,
                   SkeletonPose, load_model, rotation_from_axis_angle)
from .events import (EventCameraConfig, EventStream, edi_sharpen, load_events,
                     load_intensity_frame)
from .refine import RefineWeights, refine_pose
from .trajectories import TrackerConfig


@dataclass
class PipelineConfig:
    tracking_fps: int = 1000
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    refine: RefineWeights = field(default_factory=RefineWeights)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    batch_max_iterations: int = 4
    refine_max_iterations: int = 5
    init_max_iterations: int = 40
    disable_batch: bool = False
    disable_refine: bool = False
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def load_config(path) -> PipelineConfig:
    """TOML or JSON config file; unknown keys are rejected."""
    path = Path(path)
    if path.suffix == ".toml":
        import tomllib
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    else:
        with open(path) as f:
            doc = json.load(f)
    cfg = PipelineConfig()
    sub = {"weights": EnergyWeights, "refine": RefineWeights, "tracker": TrackerConfig}
    for key, val in doc.items():
        if key in sub:
            setattr(cfg, key, sub[key](**val))
        elif hasattr(cfg, key):
            setattr(cfg, key, val)
        else:
            raise ValueError(f"unknown config key: {key}")
    return cfg


@dataclass
class MotionOutput:
    timestamps_us: np.ndarray    # (F,) strictly increasing, no gaps
    poses: np.ndarray            # (F, 33)
    diagnostics: list            # per-batch dicts
    report: dict                 # resolved config + warnings + timings


def save_motion(path, out: MotionOutput):
    """Deterministic motion JSON (the run report with timings is separate)."""
    doc = {
        "timestamps_us": out.timestamps_us.tolist(),
        "poses": out.poses.tolist(),
        "diagnostics": out.diagnostics,
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))


def load_motion(path) -> MotionOutput:
    with open(path) as f:
        doc = json.load(f)
    return MotionOutput(np.asarray(doc["timestamps_us"], dtype=np.int64),
                        np.asarray(doc["poses"], dtype=np.float64),
                        doc["diagnostics"], {})


def _rough_init(det: DetectionSet, intrinsics: CameraIntrinsics,
                model: SkeletonModel) -> np.ndarray:
    """Depth from the ratio of 3D to 2D joint spread; zero joint angles."""
    x = np.zeros(POSE_DIM)
    nj = model.n_joints
    j2, j3 = det.joints2d, det.joints3d
    ok = (np.isfinite(j2[:nj, :2]).all(axis=1) & (j2[:nj, 2] > 0) &
          np.isfinite(j3[:, :3]).all(axis=1) & (j3[:, 3] > 0))
    fx, fy = intrinsics.focal
    cx, cy = intrinsics.principal_point
    if ok.sum() < 4:
        x[32] = 3.0
        return x
    dy2 = np.ptp(j2[:nj][ok, 1])
    dy3 = np.ptp(j3[ok, 1])
    z = fy * dy3 / max(dy2, 1.0)
    u = j2[:nj][ok, :2].mean(axis=0)
    rel = j3[ok, :3].mean(axis=0)
    x[30] = (u[0] - cx) * z / fx - rel[0]
    x[31] = (u[1] - cy) * z / fy - rel[1]
    x[32] = z
    return x


def _track_batch(stream_batch: EventStream, latent0, latent1, t0, t1,
                 n_frames, sensor_size, cfg: TrackerConfig):
    """Bidirectional feature tracking over one batch; sliced at N+1 frames."""
    seeds_f = trajectories.detect_features(latent0, cfg.max_features, cfg.min_spacing)
    seeds_b = trajectories.detect_features(latent1, cfg.max_features, cfg.min_spacing)
    fwd = trajectories.track_features(seeds_f, stream_batch, latent0, "forward", cfg)
    bwd = trajectories.track_features(seeds_b, stream_batch, latent1, "backward", cfg)
    t_mid = int((t0 + t1) // 2)
    trajs = []
    for track, stitched in trajectories.stitch_bidirectional(fwd, bwd, t_mid):
        if len(track.times) >= 2 and track.times[-1] > track.times[0]:
            trajs.append(trajectories.fit_spline(track, stitched))
    return trajectories.slice_trajectories(trajs, t0, t1, n_frames, sensor_size)


def run_capture(data_dir, config: PipelineConfig, log=None) -> MotionOutput:
    """Full pipeline over a dataset directory.  Deterministic per config."""
    t_start = time.time()
    data_dir = Path(data_dir)
    warnings = []

    def warn(msg):
        warnings.append(msg)
        if log:
            print(msg, file=log)

    model, mesh, intrinsics = load_model(data_dir / "model.json")
    with open(data_dir / "meta.json") as f:
        meta = json.load(f)
    sensor_size = tuple(meta["sensor_size"])
    if tuple(intrinsics.sensor_size) != sensor_size:
        raise ValueError("model intrinsics disagree with dataset sensor size")
    cam = EventCameraConfig(meta["contrast_threshold"],
                            meta["exposure_us"] * 1e-6,
                            meta["intensity_fps"], sensor_size)
    stream = load_events(data_dir / "events.evb", sensor_size)
    frame_paths = sorted((data_dir / "frames").glob("frame_*.png"))
    if len(frame_paths) < 2:
        raise ValueError("need at least two intensity frames")
    frames = [load_intensity_frame(p) for p in frame_paths]
    centers = np.array([int(round(fr.center_timestamp * 1e6)) for fr in frames])
    if np.any(np.diff(centers) <= 0):
        raise ValueError("intensity frame timestamps not strictly increasing")
    if centers[0] < stream.t[0] - meta["exposure_us"] or centers[-1] > stream.t[-1] + meta["exposure_us"]:
        raise ValueError("intensity frames and event stream are misaligned")

    det_by_time = {d.frame_timestamp: d for d in load_detections(data_dir / "detections.json")}

    period_us = 1e6 / cam.intensity_fps
    if abs(config.tracking_fps * period_us / 1e6 -
           round(config.tracking_fps * period_us / 1e6)) > 1e-6:
        raise ValueError("tracking_fps must be an integer multiple of the frame rate")

    all_times, all_poses, diagnostics = [], [], []
    prior = None
    batch_opts = solver.SolverOptions(max_iterations=config.batch_max_iterations)
    init_opts = solver.SolverOptions(max_iterations=config.init_max_iterations)
    refine_opts = solver.SolverOptions(max_iterations=config.refine_max_iterations)

    for b in range(len(frames) - 1):
        t0, t1 = int(centers[b]), int(centers[b + 1])
        N = max(2, int(round((t1 - t0) * config.tracking_fps / 1e6)))
        diag = {"batch": b, "t0_us": t0, "t1_us": t1, "n_frames": N}
        det0 = det_by_time.get(t0)
        det1 = det_by_time.get(t1)
        endpoint_weights = {}
        if det0 is None or det1 is None:
            warn(f"batch {b}: missing detections at an endpoint, "
                 "falling back to the temporal prior")

        if prior is None:
            any_det = det0 or det1
            prior = (_rough_init(any_det, intrinsics, model) if any_det
                     else np.concatenate([np.zeros(30), [0, 0, 3.0]]))

        poses, t_prime, diverged = initialize_batch(
            det0, det1, model, mesh, intrinsics, config.weights, N, prior,
            init_opts)
        if diverged:
            warn(f"batch {b}: endpoint initialization diverged; flagged unreliable")
        diag["init_diverged"] = bool(diverged)

        correspondences, anchors = [], None
        if not config.disable_batch:
            idx = stream.time_slice(t0, t1)
            sub = EventStream(stream.t[idx], stream.x[idx], stream.y[idx],
                              stream.p[idx], sensor_size, validate=False)
            latent0 = edi_sharpen(frames[b], stream, cam)
            latent1 = edi_sharpen(frames[b + 1], stream, cam)
            frame_times, positions, valid, correspondences = _track_batch(
                sub, latent0, latent1, t0, t1, N, sensor_size, config.tracker)
            # tracked positions are array coords, projections use +0.5 centers
            for cs in correspondences:
                cs.p_i = cs.p_i + 0.5
                cs.p_j = cs.p_j + 0.5
            # each pair binds at its own frame's interpolated pose so binding
            # error spans one inter-frame step, not the whole batch
            anchors = bind_anchor_pairs(model, mesh, poses, intrinsics,
                                        correspondences)
            diag["n_features"] = int(valid.shape[1])
            diag["n_anchors"] = int(anchors.valid.sum())
        else:
            frame_times = t0 + np.rint(np.arange(N + 1) * (t1 - t0) / N).astype(np.int64)

        bt = Batch(b, frame_times, poses, correspondences,
                   {0: det0, N: det1} if det0 or det1 else {},
                   anchors, t_prime, unreliable=diverged)
        bt.detections = {k: v for k, v in bt.detections.items() if v is not None}

        if not config.disable_batch:
            rep = optimize_batch(bt, model, mesh, intrinsics, config.weights,
                                 batch_opts,
                                 prior_pose=prior if (det0 is None) else None)
            diag["batch_cost"] = [float(rep.costs[0]), float(rep.costs[-1])]
            diag["batch_status"] = rep.status

        if not config.disable_refine:
            sil = []
            last = N if b == len(frames) - 2 else N - 1
            for f in range(0, last + 1):
                bt.poses[f], rrep = refine_pose(
                    bt.poses[f], stream, model, mesh, intrinsics,
                    int(bt.frame_times[f]), (t0, t1), config.refine, refine_opts)
                sil.append(rrep.sil_costs[-1] if rrep.sil_costs else None)
            diag["refine_sil_final"] = sil

        emit = N if b == len(frames) - 2 else N - 1
        all_times.extend(int(t) for t in bt.frame_times[:emit + 1])
        all_poses.extend(bt.poses[:emit + 1])
        prior = bt.poses[N].copy()
        diagnostics.append(diag)
        if log:
            print(f"batch {b + 1}/{len(frames) - 1} done "
                  f"({time.time() - t_start:.0f}s)", file=log)

    timestamps = np.asarray(all_times, dtype=np.int64)
    if np.any(np.diff(timestamps) <= 0):
        raise RuntimeError("output timestamps are not strictly increasing")
    report = {
        "config": config.to_dict(),
        "n_batches": len(frames) - 1,
        "n_poses": len(timestamps),
        "warnings": warnings,
        "runtime_s": round(time.time() - t_start, 3),
    }
    return MotionOutput(timestamps, np.asarray(all_poses), diagnostics, report)


# ---------------------------------------------------------------------------
# BVH-style export: hierarchy + per-frame Euler channels
# ---------------------------------------------------------------------------

def _local_rotation(model: SkeletonModel, joint: int, theta: np.ndarray) -> np.ndarray:
    R = np.eye(3)
    s = model._dof_start[joint]
    for k, axis in enumerate(model.joints[joint].axes):
        R = R @ rotation_from_axis_angle(axis * theta[s + k])
    return R


def export_bvh(path, model: SkeletonModel, out: MotionOutput):
    """Skeleton hierarchy + ZXY Euler channels per frame, meters/degrees."""
    children = [[] for _ in model.joints]
    for j, jt in enumerate(model.joints):
        if jt.parent >= 0:
            children[jt.parent].append(j)

    lines = ["HIERARCHY"]

    def emit(j, depth):
        pad = "  " * depth
        jt = model.joints[j]
        kw = "ROOT" if jt.parent < 0 else "JOINT"
        lines.append(f"{pad}{kw} {jt.name}")
        lines.append(pad + "{")
        off = jt.offset
        lines.append(f"{pad}  OFFSET {off[0]:.10f} {off[1]:.10f} {off[2]:.10f}")
        if jt.parent < 0:
            lines.append(pad + "  CHANNELS 6 Xposition Yposition Zposition "
                         "Zrotation Xrotation Yrotation")
        else:
            lines.append(pad + "  CHANNELS 3 Zrotation Xrotation Yrotation")
        if children[j]:
            for c in children[j]:
                emit(c, depth + 1)
        else:
            lines.append(pad + "  End Site")
            lines.append(pad + "  {")
            lines.append(pad + "    OFFSET 0.0 0.0 0.0")
            lines.append(pad + "  }")
        lines.append(pad + "}")

    emit(0, 0)
    # channel order follows the depth-first hierarchy traversal, which is
    # not the model's joint index order
    dfs = []

    def walk(j):
        dfs.append(j)
        for c in children[j]:
            walk(c)

    walk(0)
    n = len(out.timestamps_us)
    dt = (np.mean(np.diff(out.timestamps_us)) * 1e-6) if n > 1 else 0.04
    lines.append("MOTION")
    lines.append(f"Frames: {n}")
    lines.append(f"Frame Time: {dt:.8f}")
    for f in range(n):
        pose = SkeletonPose.from_vector(out.poses[f])
        vals = list(pose.root_translation)
        e = Rotation.from_matrix(
            rotation_from_axis_angle(pose.root_rotation)).as_euler("ZXY", degrees=True)
        vals += list(e)
        for j in dfs[1:]:
            R = _local_rotation(model, j, pose.theta)
            vals += list(Rotation.from_matrix(R).as_euler("ZXY", degrees=True))
        lines.append(" ".join(f"{v:.10f}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_bvh(path):
    """Parse a BVH file written by export_bvh.

    Returns (names, parents, offsets (J,3), frames) where each frame is
    (root_translation (3,), local rotation matrices (J,3,3)).
    """
    tokens = Path(path).read_text().split()
    names, parents, offsets = [], [], []
    stack = []
    i = 0
    while tokens[i] != "MOTION":
        tok = tokens[i]
        if tok in ("ROOT", "JOINT"):
            names.append(tokens[i + 1])
            parents.append(stack[-1] if stack else -1)
            i += 2
        elif tok == "{":
            stack.append(len(names) - 1 if names else -1)
            i += 1
        elif tok == "}":
            stack.pop()
            i += 1
        elif tok == "OFFSET":
            off = [float(tokens[i + 1]), float(tokens[i + 2]), float(tokens[i + 3])]
            # End Site offsets are not joints; attach only right after a joint
            if len(offsets) < len(names):
                offsets.append(off)
            i += 4
        elif tok == "End":
            # consume "End Site { OFFSET x y z }"
            i += 2
        elif tok == "CHANNELS":
            i += 2 + int(tokens[i + 1])
        else:
            i += 1
    i += 1  # MOTION
    assert tokens[i] == "Frames:"
    n = int(tokens[i + 1])
    assert tokens[i + 2] == "Frame" and tokens[i + 3] == "Time:"
    i += 5
    J = len(names)
    vals = np.array(tokens[i:i + n * (6 + 3 * (J - 1))], dtype=np.float64)
    vals = vals.reshape(n, 6 + 3 * (J - 1))
    frames = []
    for f in range(n):
        trans = vals[f, :3]
        rots = np.empty((J, 3, 3))
        rots[0] = Rotation.from_euler("ZXY", vals[f, 3:6], degrees=True).as_matrix()
        for j in range(1, J):
            rots[j] = Rotation.from_euler("ZXY", vals[f, 6 + 3 * (j - 1):9 + 3 * (j - 1)],
                                          degrees=True).as_matrix()
        frames.append((trans, rots))
    return names, parents, np.asarray(offsets), frames


def bvh_joint_positions(parents, offsets, frame) -> np.ndarray:
    """World joint positions for one parsed BVH frame."""
    trans, rots = frame
    J = len(parents)
    pos = np.zeros((J, 3))
    rot = np.zeros((J, 3, 3))
    for j in range(J):
        if parents[j] < 0:
            rot[j] = rots[0]
            pos[j] = trans
        else:
            p = parents[j]
            pos[j] = pos[p] + rot[p] @ offsets[j]
            rot[j] = rot[p] @ rots[j]
    return pos
