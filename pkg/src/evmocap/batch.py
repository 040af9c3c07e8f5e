"""Hybrid per-batch pose optimization.

All tracking-frame poses between two adjacent intensity frames are
estimated jointly by minimizing a four-term energy: event-correspondence
reprojection, 2D and 3D joint-detection agreement at the batch endpoints,
and temporal stabilization of joints that no event correspondence touches.

The batch parameter vector is ``[pose_0, ..., pose_N, t_prime]`` with 33
parameters per pose and a single auxiliary translation t' shared by both
endpoint frames (it maps root-relative 3D detections into the global
frame).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import body, solver
from .body import (POSE_DIM, BodyMesh, CameraIntrinsics, FKResult, SkeletonModel,
                   SkeletonPose, anchor_jacobians, landmark_jacobians,
                   project, projection_jacobian, skin_points)
from .raster import rasterize
from .trajectories import CorrespondenceSet


@dataclass
class EnergyWeights:
    lambda_adj: float = 50.0
    lambda_2d: float = 200.0
    lambda_3d: float = 1.0
    lambda_temp: float = 80.0

    def __post_init__(self):
        if min(self.lambda_adj, self.lambda_2d, self.lambda_3d, self.lambda_temp) < 0:
            raise ValueError("energy weights must be non-negative")


@dataclass
class DetectionSet:
    """Per-intensity-frame joint detections (from an external detector).

    joints2d: (N_J+4, 3) columns x, y, confidence; NaN x/y or zero
    confidence marks a missing entry.  joints3d: (N_J, 4) columns x, y, z
    (root-relative meters), confidence.
    """
    frame_timestamp: int        # us
    joints2d: np.ndarray
    joints3d: np.ndarray

    def __post_init__(self):
        self.joints2d = np.asarray(self.joints2d, dtype=np.float64)
        self.joints3d = np.asarray(self.joints3d, dtype=np.float64)
        for conf in (self.joints2d[:, -1], self.joints3d[:, -1]):
            ok = np.isnan(conf) | ((conf >= 0) & (conf <= 1))
            if not np.all(ok):
                raise ValueError("confidences must lie in [0,1]")


@dataclass
class AnchorSet:
    """Per-batch binding of feature pixels to mesh surface points."""
    valid: np.ndarray        # (H,) tau flags
    vertex_ids: np.ndarray   # (H,3)
    bary: np.ndarray         # (H,3)


@dataclass
class Batch:
    index: int
    frame_times: np.ndarray            # (N+1,) us
    poses: np.ndarray                  # (N+1, 33)
    correspondences: list              # CorrespondenceSet list
    detections: dict                   # {0: DetectionSet, N: DetectionSet}
    anchors: AnchorSet | None = None
    t_prime: np.ndarray = field(default_factory=lambda: np.zeros(3))
    unreliable: bool = False

    @property
    def n_frames(self) -> int:
        return len(self.frame_times) - 1


def _pose_slice(f: int) -> np.ndarray:
    return np.arange(f * POSE_DIM, (f + 1) * POSE_DIM)


class _FrameCache:
    """Memoizes the last (pose params -> FK/jacobian) evaluation per frame."""

    def __init__(self, model, mesh):
        self.model = model
        self.mesh = mesh
        self._land = {}
        self._anch = {}
        self._fk = {}
        self._land_pts = {}
        self._anch_pts = {}

    def _get(self, cache, key, fn):
        hit = cache.get(key)
        if hit is None:
            if len(cache) > 512:
                cache.clear()
            hit = cache[key] = fn()
        return hit

    def fk(self, x):
        return self._get(self._fk, x.tobytes(),
                         lambda: FKResult(self.model, SkeletonPose.from_vector(x)))

    def landmarks(self, x):
        """(points, jacobian); use landmark_points for residual-only passes."""
        return self._get(self._land, x.tobytes(),
                         lambda: landmark_jacobians(self.model,
                                                    SkeletonPose.from_vector(x)))

    def landmark_points(self, x):
        key = x.tobytes()
        if key in self._land:
            return self._land[key][0]
        return self._get(self._land_pts, key, lambda: self.fk(x).landmarks())

    def anchor_points(self, x, vid, bary):
        return self._get(self._anch, (x.tobytes(), vid.tobytes()),
                         lambda: anchor_jacobians(self.model, self.mesh,
                                                  SkeletonPose.from_vector(x),
                                                  vid, bary))

    def anchor_points_only(self, x, vid, bary):
        key = (x.tobytes(), vid.tobytes())
        if key in self._anch:
            return self._anch[key][0]

        def fwd():
            flat = vid.reshape(-1)
            pts = skin_points(self.fk(x), self.mesh.vertices[flat],
                              self.mesh.skinning_weights[flat])
            return np.einsum("km,kmd->kd", bary, pts.reshape(len(vid), 3, 3))

        return self._get(self._anch_pts, key, fwd)


def bind_anchors(model: SkeletonModel, mesh: BodyMesh, pose: SkeletonPose,
                 intrinsics: CameraIntrinsics, feature_positions: np.ndarray,
                 feature_valid: np.ndarray) -> AnchorSet:
    """Ray-cast feature pixels against the posed mesh via the depth buffer.

    Hits bind (face vertices + barycentric); misses get tau=0.
    """
    H_feat = len(feature_positions)
    valid = np.zeros(H_feat, dtype=bool)
    vids = np.zeros((H_feat, 3), dtype=np.int64)
    bary = np.zeros((H_feat, 3))
    verts = skin_points(FKResult(model, pose), mesh.vertices, mesh.skinning_weights)
    rr = rasterize(verts, mesh.faces, intrinsics)
    W, Hs = intrinsics.sensor_size
    for h in range(H_feat):
        if not feature_valid[h] or not np.all(np.isfinite(feature_positions[h])):
            continue
        px = int(np.floor(feature_positions[h, 0]))
        py = int(np.floor(feature_positions[h, 1]))
        if not (0 <= px < W and 0 <= py < Hs):
            continue
        fid = rr.face_id[py, px]
        if fid < 0:
            continue
        valid[h] = True
        vids[h] = mesh.faces[fid]
        bary[h] = rr.bary[py, px]
    return AnchorSet(valid, vids, bary)


def bind_anchor_pairs(model: SkeletonModel, mesh: BodyMesh, poses: np.ndarray,
                      intrinsics: CameraIntrinsics, correspondences: list) -> AnchorSet:
    """Bind every correspondence pair at its own frame's initialized pose.

    Each pair (i, j) ray-casts p_i against the mesh posed at frame i; the
    bound surface point is then asked to reproject at p_j.  Binding this way
    keeps the lever arm of any binding error to a single inter-frame step
    instead of compounding it across the whole batch, which is what happens
    if all features bind once at frame 0.

    Mutates the anchor_* fields of each correspondence set in place and
    returns the union of all bindings (for the association flags).
    """
    by_frame: dict[int, list] = {}
    for cs in correspondences:
        by_frame.setdefault(cs.frame_index, []).append(cs)
    all_valid, all_vids, all_bary = [], [], []
    for i, sets in sorted(by_frame.items()):
        pose = SkeletonPose.from_vector(poses[i])
        verts = skin_points(FKResult(model, pose), mesh.vertices,
                            mesh.skinning_weights)
        rr = rasterize(verts, mesh.faces, intrinsics)
        W, Hs = intrinsics.sensor_size
        for cs in sets:
            K = len(cs.feature_ids)
            valid = np.zeros(K, dtype=bool)
            vids = np.zeros((K, 3), dtype=np.int64)
            bary = np.zeros((K, 3))
            px = np.floor(cs.p_i).astype(np.int64)
            inb = ((px[:, 0] >= 0) & (px[:, 0] < W)
                   & (px[:, 1] >= 0) & (px[:, 1] < Hs)
                   & np.all(np.isfinite(cs.p_i), axis=1))
            for k in np.flatnonzero(inb):
                fid = rr.face_id[px[k, 1], px[k, 0]]
                if fid < 0:
                    continue
                valid[k] = True
                vids[k] = mesh.faces[fid]
                bary[k] = rr.bary[px[k, 1], px[k, 0]]
            cs.anchor_valid = valid
            cs.anchor_vertices = vids
            cs.anchor_bary = bary
            all_valid.append(valid)
            all_vids.append(vids)
            all_bary.append(bary)
    if not all_valid:
        return AnchorSet(np.zeros(0, dtype=bool), np.zeros((0, 3), dtype=np.int64),
                         np.zeros((0, 3)))
    return AnchorSet(np.concatenate(all_valid), np.concatenate(all_vids),
                     np.concatenate(all_bary))


def event_association_flags(model: SkeletonModel, mesh: BodyMesh,
                            anchors: AnchorSet) -> np.ndarray:
    """phi(l): True for joints NOT associated with any event correspondence.

    An anchor's surface point rides the bone of its dominant skinning joint;
    that bone touches exactly two joints (the dominant joint and its parent),
    and only those count as associated.  Distal joints with no anchors of
    their own (typically wrists and ankles) keep the temporal stabilizer —
    without it they sit in the null space of the correspondence term and
    drift freely on interior frames.
    """
    phi = np.ones(model.n_joints, dtype=bool)
    for h in np.flatnonzero(anchors.valid):
        w = np.einsum("m,mj->j", anchors.bary[h], mesh.skinning_weights[anchors.vertex_ids[h]])
        j = int(np.argmax(w))
        phi[j] = False
        if model.joints[j].parent >= 0:
            phi[model.joints[j].parent] = False
    return phi


# ---------------------------------------------------------------------------
# residual blocks (Gauss-Newton terms of the batch energy)
# ---------------------------------------------------------------------------

def correspondence_blocks(batch: Batch, cache: _FrameCache,
                          intrinsics: CameraIntrinsics, weight: float):
    """Event-correspondence reprojection: one block per (frame, neighbor)."""
    blocks = []
    for cs in batch.correspondences:
        if cs.anchor_valid is None:
            continue
        keep = cs.anchor_valid
        if not np.any(keep):
            continue
        vid = cs.anchor_vertices[keep]
        bary = cs.anchor_bary[keep]
        target = cs.p_j[keep]
        row_w = np.sqrt(cs.pair_weight[keep])
        j = cs.neighbor_index

        def res(x, vid=vid, bary=bary, target=target, row_w=row_w):
            pts = cache.anchor_points_only(x, vid, bary)
            uv, ok = project(intrinsics, pts, strict=False)
            r = (uv - target) * row_w[:, None]
            r[~ok] = 0.0   # behind-camera pairs drop out of this evaluation
            return r.ravel()

        def jac(x, vid=vid, bary=bary, row_w=row_w):
            pts, pj = cache.anchor_points(x, vid, bary)
            ok = pts[:, 2] > 0
            Jp = projection_jacobian(intrinsics, np.where(ok[:, None], pts, [0, 0, 1.0]))
            J = np.einsum("kab,kbp->kap", Jp, pj) * row_w[:, None, None]
            J[~ok] = 0.0
            return J.reshape(-1, POSE_DIM)

        blocks.append(solver.ResidualBlock(res, jac, _pose_slice(j), weight,
                                           name=f"adj_{cs.frame_index}_{j}"))
    return blocks


def detection_2d_block(frame: int, det: DetectionSet, cache: _FrameCache,
                       intrinsics: CameraIntrinsics, weight: float):
    """2D landmark reprojection against detections at an endpoint frame."""
    tgt = det.joints2d[:, :2]
    conf = det.joints2d[:, 2].copy()
    conf[~np.isfinite(tgt).all(axis=1)] = 0.0
    conf[~np.isfinite(conf)] = 0.0
    row_w = np.sqrt(conf)
    tgt = np.nan_to_num(tgt)

    def res(x):
        pts = cache.landmark_points(x)
        uv, ok = project(intrinsics, pts, strict=False)
        r = (uv - tgt) * row_w[:, None]
        r[~ok] = 0.0
        return r.ravel()

    def jac(x):
        pts, pj = cache.landmarks(x)
        ok = pts[:, 2] > 0
        Jp = projection_jacobian(intrinsics, np.where(ok[:, None], pts, [0, 0, 1.0]))
        J = np.einsum("kab,kbp->kap", Jp, pj) * row_w[:, None, None]
        J[~ok] = 0.0
        return J.reshape(-1, POSE_DIM)

    return solver.ResidualBlock(res, jac, _pose_slice(frame), weight, name=f"2d_{frame}")


def detection_3d_block(frame: int, det: DetectionSet, cache: _FrameCache,
                       n_frames: int, weight: float):
    """3D joint alignment J_l(S_f) - (P3d_l + t'); t' shares the batch tail."""
    n_joints = det.joints3d.shape[0]
    tgt = det.joints3d[:, :3]
    conf = det.joints3d[:, 3].copy()
    conf[~np.isfinite(tgt).all(axis=1)] = 0.0
    conf[~np.isfinite(conf)] = 0.0
    row_w = np.sqrt(conf)
    tgt = np.nan_to_num(tgt)
    idx = np.concatenate([_pose_slice(frame),
                          np.arange((n_frames + 1) * POSE_DIM,
                                    (n_frames + 1) * POSE_DIM + 3)])

    def res(x):
        pts = cache.landmark_points(x[:POSE_DIM])
        t_prime = x[POSE_DIM:]
        r = (pts[:n_joints] - (tgt + t_prime)) * row_w[:, None]
        return r.ravel()

    def jac(x):
        _, pj = cache.landmarks(x[:POSE_DIM])
        J = np.zeros((n_joints, 3, POSE_DIM + 3))
        J[:, :, :POSE_DIM] = pj[:n_joints]
        J[:, :, POSE_DIM:] = -np.eye(3)
        J *= row_w[:, None, None]
        return J.reshape(-1, POSE_DIM + 3)

    return solver.ResidualBlock(res, jac, idx, weight, name=f"3d_{frame}")


def temporal_blocks(batch: Batch, cache: _FrameCache, phi: np.ndarray, weight: float):
    """Joint-position stabilization between consecutive frames, flagged joints."""
    blocks = []
    sel = np.flatnonzero(phi)
    if sel.size == 0:
        return blocks
    N = batch.n_frames
    for i in range(N):
        idx = np.concatenate([_pose_slice(i), _pose_slice(i + 1)])

        def res(x, sel=sel):
            a = cache.landmark_points(x[:POSE_DIM])
            b = cache.landmark_points(x[POSE_DIM:])
            return (a[sel] - b[sel]).ravel()

        def jac(x, sel=sel):
            _, ja = cache.landmarks(x[:POSE_DIM])
            _, jb = cache.landmarks(x[POSE_DIM:])
            J = np.zeros((len(sel), 3, 2 * POSE_DIM))
            J[:, :, :POSE_DIM] = ja[sel]
            J[:, :, POSE_DIM:] = -jb[sel]
            return J.reshape(-1, 2 * POSE_DIM)

        blocks.append(solver.ResidualBlock(res, jac, idx, weight, name=f"temp_{i}"))
    return blocks


def _batch_bounds(model: SkeletonModel, n_frames: int) -> solver.BoundsSpec:
    n = (n_frames + 1) * POSE_DIM + 3
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for f in range(n_frames + 1):
        s = f * POSE_DIM
        lo[s:s + body.N_THETA] = model.angle_lower
        hi[s:s + body.N_THETA] = model.angle_upper
    return solver.BoundsSpec(lo, hi)


def initialize_batch(det_0: DetectionSet | None, det_n: DetectionSet | None,
                     model: SkeletonModel, mesh: BodyMesh,
                     intrinsics: CameraIntrinsics, weights: EnergyWeights,
                     n_frames: int, prior_pose: np.ndarray,
                     opts: solver.SolverOptions | None = None):
    """Endpoint-only detection fit followed by per-parameter interpolation.

    Returns (poses (N+1, 33), t_prime, diverged flag).  A missing endpoint
    detection leaves that endpoint at the prior pose.
    """
    cache = _FrameCache(model, mesh)
    n_params = 2 * POSE_DIM + 3
    x0 = np.concatenate([prior_pose, prior_pose, np.zeros(3)])
    blocks = []
    for f, det in ((0, det_0), (1, det_n)):
        if det is None:
            continue
        blocks.append(detection_2d_block(f, det, cache, intrinsics, weights.lambda_2d))
        b3 = detection_3d_block(f, det, cache, 1, weights.lambda_3d)
        blocks.append(b3)
    diverged = False
    if blocks:
        bounds = _batch_bounds(model, 1)
        x, rep = solver.minimize(blocks, x0, bounds,
                                 opts or solver.SolverOptions(max_iterations=60))
        diverged = rep.status == "stalled" or not np.all(np.isfinite(x))
        if diverged:
            x = x0
    else:
        x = x0
    s0 = x[:POSE_DIM]
    sn = x[POSE_DIM:2 * POSE_DIM]
    if det_0 is None:
        s0 = prior_pose
    if det_n is None:
        sn = prior_pose
    t_prime = x[2 * POSE_DIM:]
    alpha = np.linspace(0.0, 1.0, n_frames + 1)[:, None]
    poses = (1 - alpha) * s0[None, :] + alpha * sn[None, :]
    return poses, t_prime, diverged


def optimize_batch(batch: Batch, model: SkeletonModel, mesh: BodyMesh,
                   intrinsics: CameraIntrinsics, weights: EnergyWeights,
                   opts: solver.SolverOptions | None = None,
                   prior_pose: np.ndarray | None = None,
                   endpoint_weights: dict | None = None):
    """Minimize the full four-term batch energy in place; returns the report.

    endpoint_weights optionally overrides (lambda_2d, lambda_3d) per
    endpoint, used for the missing-detection fallback.
    """
    N = batch.n_frames
    cache = _FrameCache(model, mesh)
    blocks = correspondence_blocks(batch, cache, intrinsics, weights.lambda_adj)
    for f in (0, N):
        det = batch.detections.get(f)
        if det is None:
            continue
        w2, w3 = weights.lambda_2d, weights.lambda_3d
        if endpoint_weights and f in endpoint_weights:
            w2, w3 = endpoint_weights[f]
        if w2 > 0:
            blocks.append(detection_2d_block(f, det, cache, intrinsics, w2))
        if w3 > 0:
            blocks.append(detection_3d_block(f, det, cache, N, w3))
    if batch.anchors is not None:
        phi = event_association_flags(model, mesh, batch.anchors)
    else:
        phi = np.ones(model.n_joints, dtype=bool)
    if weights.lambda_temp > 0:
        blocks += temporal_blocks(batch, cache, phi, weights.lambda_temp)
    if prior_pose is not None:
        # stability prior toward the previous batch's terminal pose (dropout fallback)
        def res(x, p=prior_pose):
            a = cache.landmark_points(x)
            b = cache.landmark_points(p)
            return (a - b).ravel()

        def jac(x):
            _, ja = cache.landmarks(x)
            return ja.reshape(-1, POSE_DIM)

        blocks.append(solver.ResidualBlock(res, jac, _pose_slice(0),
                                           weights.lambda_temp, name="prior"))

    x0 = np.concatenate([batch.poses.ravel(), batch.t_prime])
    bounds = _batch_bounds(model, N)
    x, rep = solver.minimize(blocks, x0, bounds,
                             opts or solver.SolverOptions(max_iterations=40))
    batch.poses = x[:(N + 1) * POSE_DIM].reshape(N + 1, POSE_DIM)
    batch.t_prime = x[(N + 1) * POSE_DIM:]
    return rep


# ---------------------------------------------------------------------------
# detections file: JSON array, one entry per intensity frame
# ---------------------------------------------------------------------------

def save_detections(path, detections: list[DetectionSet]):
    doc = []
    for d in detections:
        doc.append({
            "t_us": int(d.frame_timestamp),
            "joints2d": [{"x": float(r[0]), "y": float(r[1]), "c": float(r[2])}
                         for r in d.joints2d],
            "joints3d": [{"x": float(r[0]), "y": float(r[1]), "z": float(r[2]),
                          "c": float(r[3])} for r in d.joints3d],
        })
    with open(path, "w") as f:
        json.dump(doc, f)


def load_detections(path) -> list[DetectionSet]:
    with open(path) as f:
        doc = json.load(f)
    out = []
    for d in doc:
        j2 = np.array([[e["x"], e["y"], e["c"]] for e in d["joints2d"]])
        j3 = np.array([[e["x"], e["y"], e["z"], e["c"]] for e in d["joints3d"]])
        out.append(DetectionSet(int(d["t_us"]), j2, j3))
    return out


# Expected joint ordering for external detector outputs: entries 0..N_J-1
# follow SkeletonModel.joints order; entries N_J..N_J+3 are the face
# landmarks (nose, left eye, right eye, chin).  Map real detector outputs
# into this order before saving with save_detections.
def detector_joint_order(model: SkeletonModel) -> list[str]:
    return [jt.name for jt in model.joints] + ["nose", "l_eye", "r_eye", "chin"]
