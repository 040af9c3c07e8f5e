"""Event-based pose refinement.

Per tracking frame, the projected mesh boundary is aligned to
spatio-temporally nearby events in an ICP fashion: each boundary pixel is
paired with its closest event under a combined temporal/spatial distance,
then the pose is re-optimized with a 2D point-to-plane silhouette term
plus a stability term anchored at the batch-optimized pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
from numba import njit

from . import solver
from .body import (POSE_DIM, BodyMesh, CameraIntrinsics, FKResult, SkeletonModel,
                   SkeletonPose, anchor_jacobians, landmark_jacobians,
                   project, projection_jacobian, skin_points)
from .events import EventStream
from .raster import rasterize


@dataclass
class RefineWeights:
    lambda_sil: float = 1.0
    lambda_stab: float = 5.0
    lambda_dist: float = 4.0
    icp_iterations: int = 4
    patch_size: int = 8      # half-open [x-4, x+4) x [y-4, y+4) search patch
    max_boundary_points: int = 400   # cap on silhouette pairs per iteration

    def __post_init__(self):
        if min(self.lambda_sil, self.lambda_stab, self.lambda_dist) < 0:
            raise ValueError("refine weights must be non-negative")


@dataclass
class Boundary:
    """Silhouette pixels of the projected mesh with normals and anchors."""
    positions: np.ndarray    # (B,2) integer pixel coords as floats
    normals: np.ndarray      # (B,2) unit outward normals
    vertex_ids: np.ndarray   # (B,3)
    bary: np.ndarray         # (B,3)

    def __len__(self):
        return len(self.positions)


def extract_boundary(model: SkeletonModel, mesh: BodyMesh, pose: SkeletonPose,
                     intrinsics: CameraIntrinsics) -> Boundary:
    """Silhouette pixels via depth-buffer rasterization.

    Boundary pixels are foreground pixels with a 4-neighborhood background
    transition; normals come from the Gaussian-smoothed signed distance
    transform of the silhouette mask; anchors are the visible face and
    barycentric coordinates at the pixel.
    """
    verts = skin_points(FKResult(model, pose), mesh.vertices, mesh.skinning_weights)
    rr = rasterize(verts, mesh.faces, intrinsics)
    mask = rr.mask
    if not mask.any():
        return Boundary(np.zeros((0, 2)), np.zeros((0, 2)),
                        np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    pad = np.pad(mask, 1, constant_values=False)
    nbg = (~pad[:-2, 1:-1]) | (~pad[2:, 1:-1]) | (~pad[1:-1, :-2]) | (~pad[1:-1, 2:])
    bnd = mask & nbg
    ys, xs = np.nonzero(bnd)

    m8 = mask.astype(np.uint8)
    d_in = cv2.distanceTransform(m8, cv2.DIST_L2, 3)
    d_out = cv2.distanceTransform(1 - m8, cv2.DIST_L2, 3)
    sdf = cv2.GaussianBlur(d_out - d_in, (0, 0), 1.0)
    gy, gx = np.gradient(sdf)
    n = np.stack([gx[ys, xs], gy[ys, xs]], axis=1)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    norm[norm < 1e-9] = 1.0
    n /= norm

    fid = rr.face_id[ys, xs]
    return Boundary(np.stack([xs, ys], axis=1).astype(np.float64), n,
                    mesh.faces[fid].astype(np.int64), rr.bary[ys, xs])


@njit(cache=True)
def _closest_core(bx, by, ptr, ev_t, ev_order, W, H, t_f, dur, lam, half, out):
    nb = bx.shape[0]
    for b in range(nb):
        x0 = int(bx[b]) - half
        y0 = int(by[b]) - half
        best = -1
        best_d = np.inf
        best_t = np.int64(0)
        for yy in range(max(0, y0), min(H, y0 + 2 * half)):
            for xx in range(max(0, x0), min(W, x0 + 2 * half)):
                pid = yy * W + xx
                for k in range(ptr[pid], ptr[pid + 1]):
                    t = ev_t[k]
                    dt = (t_f - t) / dur
                    d = lam * dt * dt + (bx[b] - xx) ** 2 + (by[b] - yy) ** 2
                    if d < best_d or (d == best_d and t < best_t):
                        best_d = d
                        best_t = t
                        best = ev_order[k]
        out[b] = best


class EventWindowIndex:
    """Per-pixel CSR index over the events in one temporal window."""

    def __init__(self, stream: EventStream, t_lo, t_hi):
        W, H = stream.sensor_size
        self.W, self.H = W, H
        a = np.searchsorted(stream.t, t_lo, side="left")
        b = np.searchsorted(stream.t, t_hi, side="right")
        sel = np.arange(a, b)
        pix = stream.y[sel].astype(np.int64) * W + stream.x[sel]
        order = np.lexsort((stream.t[sel], pix))
        self.global_idx = sel[order]
        self.t = stream.t[sel][order]
        counts = np.bincount(pix, minlength=W * H)
        self.ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)


def closest_events(boundary: Boundary, index: EventWindowIndex, t_f: int,
                   batch_duration: int, weights: RefineWeights) -> np.ndarray:
    """Global stream index of the closest event per boundary pixel (-1 = none).

    Distance: lambda_dist*((t_f - t)/duration)^2 + ||s_b - u||^2, searched
    over the patch and the batch-duration temporal window; ties broken by
    earlier timestamp then row-major pixel order.
    """
    out = np.empty(len(boundary), dtype=np.int64)
    if len(boundary) == 0:
        return out
    _closest_core(boundary.positions[:, 0], boundary.positions[:, 1],
                  index.ptr, index.t, index.global_idx,
                  index.W, index.H, float(t_f), float(batch_duration),
                  weights.lambda_dist, weights.patch_size // 2, out)
    return out


def closest_event(s_b, stream: EventStream, t_f: int, batch_duration: int,
                  weights: RefineWeights):
    """Single-pixel convenience wrapper; returns a global event index or None."""
    bnd = Boundary(np.asarray([s_b], dtype=np.float64), np.zeros((1, 2)),
                   np.zeros((1, 3), dtype=np.int64), np.zeros((1, 3)))
    idx = EventWindowIndex(stream, t_f - batch_duration / 2.0,
                           t_f + batch_duration / 2.0)
    out = closest_events(bnd, idx, t_f, batch_duration, weights)
    return int(out[0]) if out[0] >= 0 else None


def silhouette_block(model, mesh, intrinsics, boundary: Boundary,
                     targets: np.ndarray, weight: float) -> solver.ResidualBlock:
    """Point-to-plane residuals n_b . (pi(v_b(S)) - u_b), one per pair."""
    vid, bary, nrm = boundary.vertex_ids, boundary.bary, boundary.normals
    memo = {}

    def anchors(x):
        key = x.tobytes()
        if key not in memo:
            memo.clear()
            memo[key] = anchor_jacobians(model, mesh, SkeletonPose.from_vector(x),
                                         vid, bary)
        return memo[key]

    def res(x):
        pts, _ = anchors(x)
        uv, ok = project(intrinsics, pts, strict=False)
        r = np.einsum("kd,kd->k", nrm, uv - targets)
        r[~ok] = 0.0
        return r

    def jac(x):
        pts, pj = anchors(x)
        ok = pts[:, 2] > 0
        Jp = projection_jacobian(intrinsics, np.where(ok[:, None], pts, [0, 0, 1.0]))
        J = np.einsum("kd,kdb,kbp->kp", nrm, Jp, pj)
        J[~ok] = 0.0
        return J

    return solver.ResidualBlock(res, jac, np.arange(POSE_DIM), weight, name="sil")


def stability_block(model, anchor_pose: np.ndarray, weight: float) -> solver.ResidualBlock:
    """3D joint displacement from the batch-optimized anchor pose."""
    anchor_joints, _ = landmark_jacobians(model, SkeletonPose.from_vector(anchor_pose))
    nj = model.n_joints
    memo = {}

    def lands(x):
        key = x.tobytes()
        if key not in memo:
            memo.clear()
            memo[key] = landmark_jacobians(model, SkeletonPose.from_vector(x))
        return memo[key]

    def res(x):
        pts, _ = lands(x)
        return (pts[:nj] - anchor_joints[:nj]).ravel()

    def jac(x):
        _, pj = lands(x)
        return pj[:nj].reshape(-1, POSE_DIM)

    return solver.ResidualBlock(res, jac, np.arange(POSE_DIM), weight, name="stab")


@dataclass
class RefineReport:
    sil_costs: list = field(default_factory=list)   # E_sil after each ICP iteration
    n_pairs: list = field(default_factory=list)
    skipped: bool = False


def refine_pose(pose_hat: np.ndarray, stream: EventStream, model: SkeletonModel,
                mesh: BodyMesh, intrinsics: CameraIntrinsics, t_f: int,
                batch_interval: tuple, weights: RefineWeights,
                opts: solver.SolverOptions | None = None,
                window_index: EventWindowIndex | None = None):
    """ICP refinement of one tracking-frame pose; returns (pose, RefineReport).

    Each iteration re-extracts the silhouette, pairs boundary pixels with
    their closest events and minimizes the weighted silhouette+stability
    energy.  Empty boundary or zero pairs returns the input unchanged.
    """
    report = RefineReport()
    if weights.lambda_sil == 0:
        report.skipped = True
        return pose_hat.copy(), report

    duration = int(batch_interval[1] - batch_interval[0])
    if window_index is None:
        window_index = EventWindowIndex(stream, t_f - duration / 2.0,
                                        t_f + duration / 2.0)
    opts = opts or solver.SolverOptions(max_iterations=10)
    lo = np.concatenate([model.angle_lower, np.full(6, -np.inf)])
    hi = np.concatenate([model.angle_upper, np.full(6, np.inf)])
    bounds = solver.BoundsSpec(lo, hi)

    x = pose_hat.copy()
    prev_cost = np.inf
    for _ in range(weights.icp_iterations):
        x_before = x.copy()
        boundary = extract_boundary(model, mesh, SkeletonPose.from_vector(x), intrinsics)
        if len(boundary) == 0:
            report.skipped = True
            return pose_hat.copy(), report
        if len(boundary) > weights.max_boundary_points:
            step = -(-len(boundary) // weights.max_boundary_points)
            boundary = Boundary(boundary.positions[::step], boundary.normals[::step],
                                boundary.vertex_ids[::step], boundary.bary[::step])
        ev_idx = closest_events(boundary, window_index, t_f, duration, weights)
        keep = ev_idx >= 0
        if not keep.any():
            report.skipped = True
            return pose_hat.copy(), report
        bsel = Boundary(boundary.positions[keep], boundary.normals[keep],
                        boundary.vertex_ids[keep], boundary.bary[keep])
        # events live on integer pixel coords; projections use pixel centers
        targets = np.stack([stream.x[ev_idx[keep]], stream.y[ev_idx[keep]]],
                           axis=1).astype(np.float64) + 0.5
        sil = silhouette_block(model, mesh, intrinsics, bsel, targets,
                               weights.lambda_sil)
        stab = stability_block(model, pose_hat, weights.lambda_stab)
        x, _ = solver.minimize([sil, stab], x, bounds, opts)
        cost = float(weights.lambda_sil * np.sum(sil.residual(x) ** 2))
        if cost > prev_cost:
            # re-pairing made things worse; keep the previous iterate
            x = x_before
            break
        prev_cost = cost
        report.sil_costs.append(cost)
        report.n_pairs.append(int(keep.sum()))
    return x, report
