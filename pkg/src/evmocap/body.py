"""Kinematic skeleton, linear-blend-skinned body mesh and pinhole camera.

The skeleton is a rooted tree of joints.  Each joint contributes zero or
more single-axis rotation DOFs (27 angular DOFs in the default humanoid);
the root additionally carries a free axis-angle rotation and translation,
so a full pose is a 33-vector ``[theta(27), root_rot(3), root_trans(3)]``.

All operations are pure functions over immutable model data and are safe
to call concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

N_FACE_LANDMARKS = 4

# pose vector layout
N_THETA = 27
POSE_DIM = N_THETA + 6
ROOT_ROT = slice(N_THETA, N_THETA + 3)
ROOT_TRANS = slice(N_THETA + 3, N_THETA + 6)


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: tuple[float, float]
    principal_point: tuple[float, float]
    sensor_size: tuple[int, int]

    def __post_init__(self):
        if self.focal[0] <= 0 or self.focal[1] <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int                 # -1 for the root
    offset: np.ndarray          # (3,) rest offset from the parent, meters
    axes: np.ndarray            # (k,3) unit rotation axes, applied in order


@dataclass(frozen=True)
class SkeletonPose:
    theta: np.ndarray           # (27,)
    root_rotation: np.ndarray   # (3,) axis-angle
    root_translation: np.ndarray  # (3,) meters

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.root_rotation, self.root_translation])

    @staticmethod
    def from_vector(x: np.ndarray) -> "SkeletonPose":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (POSE_DIM,):
            raise ValueError(f"pose vector must have shape ({POSE_DIM},)")
        return SkeletonPose(x[:N_THETA].copy(), x[ROOT_ROT].copy(), x[ROOT_TRANS].copy())

    @staticmethod
    def identity() -> "SkeletonPose":
        return SkeletonPose(np.zeros(N_THETA), np.zeros(3), np.zeros(3))


class SkeletonModel:
    """Joint tree with per-DOF axes, angle bounds and face landmarks."""

    def __init__(self, joints, angle_lower, angle_upper, face_landmarks, head_joint):
        self.joints = list(joints)
        self.angle_lower = np.asarray(angle_lower, dtype=np.float64)
        self.angle_upper = np.asarray(angle_upper, dtype=np.float64)
        self.face_landmarks = np.asarray(face_landmarks, dtype=np.float64)
        self.head_joint = int(head_joint)

        self.n_joints = len(self.joints)
        # flat DOF table: dof d -> (joint, axis index within joint)
        self.dof_joint = np.array(
            [j for j, jt in enumerate(self.joints) for _ in range(len(jt.axes))],
            dtype=np.int64,
        )
        self.n_dof = len(self.dof_joint)
        self._dof_start = np.zeros(self.n_joints, dtype=np.int64)
        s = 0
        for j, jt in enumerate(self.joints):
            self._dof_start[j] = s
            s += len(jt.axes)

        if self.n_dof != N_THETA:
            raise ValueError(f"model must have {N_THETA} angular DOFs, got {self.n_dof}")
        if np.any(self.angle_lower > self.angle_upper):
            raise ValueError("angle_lower must be <= angle_upper")
        if self.face_landmarks.shape != (N_FACE_LANDMARKS, 3):
            raise ValueError("expected exactly 4 face landmarks")
        for j, jt in enumerate(self.joints):
            if jt.parent >= j:
                raise ValueError("joints must be topologically ordered (parent before child)")
        if sum(1 for jt in self.joints if jt.parent < 0) != 1:
            raise ValueError("exactly one root joint required")

        # dof d affects joint j iff dof's joint is an ancestor of j or j itself
        self._affects = np.zeros((self.n_joints, self.n_dof), dtype=bool)
        for j in range(self.n_joints):
            a = j
            while a >= 0:
                s0 = self._dof_start[a]
                self._affects[j, s0:s0 + len(self.joints[a].axes)] = True
                a = self.joints[a].parent

        self._rest_positions = self._compute_rest_positions()

    def _compute_rest_positions(self):
        pos = np.zeros((self.n_joints, 3))
        for j, jt in enumerate(self.joints):
            pos[j] = jt.offset if jt.parent < 0 else pos[jt.parent] + jt.offset
        return pos

    @property
    def rest_joint_positions(self) -> np.ndarray:
        return self._rest_positions.copy()

    @property
    def n_landmarks(self) -> int:
        return self.n_joints + N_FACE_LANDMARKS

    def clamp(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.angle_lower, self.angle_upper)


@dataclass(frozen=True)
class BodyMesh:
    vertices: np.ndarray          # (V,3) rest positions
    faces: np.ndarray             # (F,3) int
    skinning_weights: np.ndarray  # (V,J) row-stochastic

    def __post_init__(self):
        w = self.skinning_weights
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("skinning weight rows must be non-negative and sum to 1")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")


def _axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a fixed unit axis."""
    c, s = np.cos(angle), np.sin(angle)
    k = np.asarray(axis, dtype=np.float64)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return c * np.eye(3) + s * K + (1 - c) * np.outer(k, k)


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + _skew(w)
    return _axis_angle_matrix(w / theta, theta)


def so3_right_jacobian(w: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): exp((w+d)^) ~ exp(w^) exp((J_r d)^)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = _skew(w)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    a = (1 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - a * W + b * (W @ W)


class FKResult:
    """Per-joint world transforms plus the caches the Jacobians need."""

    def __init__(self, model: SkeletonModel, pose: SkeletonPose):
        x = pose.as_vector()
        if not np.all(np.isfinite(x)):
            raise ValueError("pose must be finite")
        self.model = model
        self.pose = pose
        J, D = model.n_joints, model.n_dof

        self.rot = np.zeros((J, 3, 3))     # world rotation per joint
        self.pos = np.zeros((J, 3))        # world joint origin
        self.dof_axis = np.zeros((D, 3))   # world rotation axis per DOF
        self.dof_center = np.zeros((D, 3))  # world center of rotation per DOF

        R_root = rotation_from_axis_angle(pose.root_rotation)
        t_root = pose.root_translation

        for j, jt in enumerate(model.joints):
            if jt.parent < 0:
                Rp, tp = R_root, t_root
            else:
                Rp, tp = self.rot[jt.parent], self.pos[jt.parent]
            t = tp + Rp @ jt.offset
            R = Rp
            s0 = model._dof_start[j]
            for k, axis in enumerate(jt.axes):
                self.dof_axis[s0 + k] = R @ axis
                self.dof_center[s0 + k] = t
                R = R @ _axis_angle_matrix(axis, pose.theta[s0 + k])
            self.rot[j] = R
            self.pos[j] = t

        self.root_R = R_root
        self.root_t = t_root

    def landmarks(self) -> np.ndarray:
        """World positions of the N_J joints followed by the 4 face landmarks."""
        m = self.model
        face = (self.rot[m.head_joint] @ m.face_landmarks.T).T + self.pos[m.head_joint]
        return np.vstack([self.pos, face])

    def skinning_transforms(self):
        """Affine maps (R, t) per joint taking rest-pose points to world."""
        rest = self.model._rest_positions
        R = self.rot
        t = self.pos - np.einsum("jab,jb->ja", R, rest)
        return R, t


def forward_kinematics(model: SkeletonModel, pose: SkeletonPose) -> np.ndarray:
    """3D world positions of all N_J+4 landmarks for the given pose."""
    return FKResult(model, pose).landmarks()


def skin_points(fk: FKResult, rest_points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """LBS blend of per-joint rigid transforms applied to rest-space points.

    rest_points: (K,3); weights: (K,J) rows summing to 1.
    """
    R, t = fk.skinning_transforms()
    per_joint = np.einsum("jab,kb->kja", R, rest_points) + t[None, :, :]
    return np.einsum("kj,kja->ka", weights, per_joint)


def skin_vertices(model: SkeletonModel, mesh: BodyMesh, pose: SkeletonPose) -> np.ndarray:
    return skin_points(FKResult(model, pose), mesh.vertices, mesh.skinning_weights)


def project(intrinsics: CameraIntrinsics, points: np.ndarray, strict: bool = True):
    """Perspective projection of (...,3) camera-frame points to pixels.

    With strict=True a non-positive depth raises; otherwise returns
    (pixels, valid) where invalid rows are filled with NaN.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    valid = z > 0
    fx, fy = intrinsics.focal
    cx, cy = intrinsics.principal_point
    if strict:
        if not np.all(valid):
            raise ValueError("point behind camera (z <= 0)")
        uv = np.stack([fx * points[..., 0] / z + cx, fy * points[..., 1] / z + cy], axis=-1)
        return uv
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([fx * points[..., 0] / z + cx, fy * points[..., 1] / z + cy], axis=-1)
    uv[~valid] = np.nan
    return uv, valid


def projection_jacobian(intrinsics: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """d(pixel)/d(point): (...,2,3) for camera-frame points with z>0."""
    points = np.asarray(points, dtype=np.float64)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    fx, fy = intrinsics.focal
    J = np.zeros(points.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / z**2
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / z**2
    return J


def pose_jacobians(fk: FKResult, rest_points: np.ndarray,
                   weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(point)/d(pose) for LBS points.

    Returns (points (K,3), jac (K,3,33)).  Landmarks use weight 1 on their
    joint and their joint-frame rest position.
    """
    model = fk.model
    R, t = fk.skinning_transforms()
    per_joint = np.einsum("jab,kb->kja", R, rest_points) + t[None, :, :]  # (K,J,3)
    points = np.einsum("kj,kja->ka", weights, per_joint)
    K = len(rest_points)
    jac = np.zeros((K, 3, POSE_DIM))

    for j in range(model.n_joints):
        wj = weights[:, j]
        sel = np.nonzero(wj > 1e-12)[0]
        if sel.size == 0:
            continue
        pj = per_joint[sel, j]  # (S,3) joint-j rigid image of the points
        for d in np.nonzero(model._affects[j])[0]:
            arm = pj - fk.dof_center[d]
            a = fk.dof_axis[d]
            cx = a[1] * arm[:, 2] - a[2] * arm[:, 1]
            cy = a[2] * arm[:, 0] - a[0] * arm[:, 2]
            cz = a[0] * arm[:, 1] - a[1] * arm[:, 0]
            w_sel = wj[sel]
            jac[sel, 0, d] += w_sel * cx
            jac[sel, 1, d] += w_sel * cy
            jac[sel, 2, d] += w_sel * cz

    # root rotation: p = R(w) q + t_root with q the pre-root point
    q = np.einsum("ba,kb->ka", fk.root_R, points - fk.root_t)  # R^T (p - t)
    Jr = so3_right_jacobian(fk.pose.root_rotation)
    skew_q = np.zeros((K, 3, 3))
    skew_q[:, 0, 1] = -q[:, 2]
    skew_q[:, 0, 2] = q[:, 1]
    skew_q[:, 1, 0] = q[:, 2]
    skew_q[:, 1, 2] = -q[:, 0]
    skew_q[:, 2, 0] = -q[:, 1]
    skew_q[:, 2, 1] = q[:, 0]
    jac[:, :, ROOT_ROT] = -np.einsum("ab,kbc,cd->kad", fk.root_R, skew_q, Jr)
    jac[:, :, ROOT_TRANS] = np.eye(3)
    return points, jac


def landmark_jacobians(model: SkeletonModel, pose: SkeletonPose):
    """(landmarks (N_J+4,3), jac (N_J+4,3,33)) via the LBS Jacobian core."""
    fk = FKResult(model, pose)
    J = model.n_joints
    rest = np.vstack([model._rest_positions,
                      model._rest_positions[model.head_joint] + model.face_landmarks])
    # a joint landmark rides rigidly on its own joint; face landmarks on the head
    w = np.zeros((model.n_landmarks, J))
    w[np.arange(J), np.arange(J)] = 1.0
    w[J:, model.head_joint] = 1.0
    # rest entry for a joint landmark must be the joint's own rest origin so
    # that G_j maps it to the joint's world origin
    return pose_jacobians(fk, rest, w)


def anchor_jacobians(model: SkeletonModel, mesh: BodyMesh, pose: SkeletonPose,
                     vertex_ids: np.ndarray, bary: np.ndarray):
    """Skinned surface anchors (barycentric points on faces) and Jacobians.

    vertex_ids: (K,3) int, bary: (K,3).  Returns (points (K,3), jac (K,3,33)).
    """
    fk = FKResult(model, pose)
    K = len(vertex_ids)
    flat_ids = np.asarray(vertex_ids).reshape(-1)
    pts, jac = pose_jacobians(fk, mesh.vertices[flat_ids], mesh.skinning_weights[flat_ids])
    pts = np.einsum("km,kmd->kd", bary, pts.reshape(K, 3, 3))
    jac = np.einsum("km,kmdp->kdp", bary, jac.reshape(K, 3, 3, POSE_DIM))
    return pts, jac


# ---------------------------------------------------------------------------
# default procedural body: capsule limbs on a 17-joint / 27-DOF humanoid
# ---------------------------------------------------------------------------

def _humanoid_joints():
    ax = np.array([1.0, 0, 0])
    ay = np.array([0, 1.0, 0])
    az = np.array([0, 0, 1.0])
    ball = np.stack([ax, ay, az])
    # camera frame: x right, y down, z forward; body faces the camera (-z)
    j = [
        Joint("root", -1, np.zeros(3), np.zeros((0, 3))),
        Joint("spine", 0, np.array([0, -0.12, 0.0]), ball),
        Joint("chest", 1, np.array([0, -0.15, 0.0]), ball),
        Joint("neck", 2, np.array([0, -0.18, 0.0]), ball),
        Joint("head", 3, np.array([0, -0.10, 0.0]), np.zeros((0, 3))),
        Joint("l_hip", 0, np.array([0.09, 0.05, 0.0]), ball),
        Joint("l_knee", 5, np.array([0, 0.40, 0.0]), ax[None]),
        Joint("l_ankle", 6, np.array([0, 0.40, 0.0]), ax[None]),
        Joint("r_hip", 0, np.array([-0.09, 0.05, 0.0]), ball),
        Joint("r_knee", 8, np.array([0, 0.40, 0.0]), ax[None]),
        Joint("r_ankle", 9, np.array([0, 0.40, 0.0]), ax[None]),
        Joint("l_shoulder", 2, np.array([0.17, -0.04, 0.0]), ball),
        Joint("l_elbow", 11, np.array([0.26, 0, 0.0]), ay[None]),
        Joint("l_wrist", 12, np.array([0.25, 0, 0.0]), np.zeros((0, 3))),
        Joint("r_shoulder", 2, np.array([-0.17, -0.04, 0.0]), ball),
        Joint("r_elbow", 14, np.array([-0.26, 0, 0.0]), ay[None]),
        Joint("r_wrist", 15, np.array([-0.25, 0, 0.0]), np.zeros((0, 3))),
    ]
    return j


# documented default joint-angle ranges (radians); override via the model file
_BOUND_TABLE = {
    "spine": 0.6, "chest": 0.6, "neck": 0.9,
    "l_hip": 1.8, "r_hip": 1.8,
    "l_knee": 2.4, "r_knee": 2.4,
    "l_ankle": 0.9, "r_ankle": 0.9,
    "l_shoulder": 2.4, "r_shoulder": 2.4,
    "l_elbow": 2.6, "r_elbow": 2.6,
}


def default_skeleton() -> SkeletonModel:
    joints = _humanoid_joints()
    lo, hi = [], []
    for jt in joints:
        b = _BOUND_TABLE.get(jt.name, 0.0)
        lo += [-b] * len(jt.axes)
        hi += [b] * len(jt.axes)
    face = np.array([
        [0.00, -0.04, -0.09],   # nose
        [0.035, -0.06, -0.075],  # left eye
        [-0.035, -0.06, -0.075],  # right eye
        [0.00, 0.04, -0.085],   # chin
    ])
    head = next(i for i, jt in enumerate(joints) if jt.name == "head")
    return SkeletonModel(joints, lo, hi, face, head)


_BONE_RADII = {
    "spine": 0.13, "chest": 0.14, "neck": 0.055, "head": 0.09,
    "l_hip": 0.07, "r_hip": 0.07, "l_knee": 0.06, "r_knee": 0.06,
    "l_ankle": 0.045, "r_ankle": 0.045,
    "l_shoulder": 0.05, "r_shoulder": 0.05,
    "l_elbow": 0.042, "r_elbow": 0.042, "l_wrist": 0.035, "r_wrist": 0.035,
}


def default_mesh(model: SkeletonModel, rings: int = 5, segments: int = 8) -> BodyMesh:
    """Capsule-limb body: one tapered tube per bone plus a head sphere."""
    rest = model._rest_positions
    verts, faces, weights = [], [], []

    def add_tube(p0, p1, r0, r1, joint, parent_joint):
        base = len(verts)
        axis = p1 - p0
        length = np.linalg.norm(axis)
        axis = axis / length
        ref = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 0, 1.0])
        u = np.cross(axis, ref)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        for i in range(rings):
            s = i / (rings - 1)
            c = p0 + s * length * axis
            r = (1 - s) * r0 + s * r1
            for k in range(segments):
                a = 2 * np.pi * k / segments
                verts.append(c + r * (np.cos(a) * u + np.sin(a) * v))
                w = np.zeros(model.n_joints)
                # blend toward the parent's frame at the proximal end
                if i == 0 and parent_joint >= 0:
                    w[joint] = 0.5
                    w[parent_joint] = 0.5
                else:
                    w[joint] = 1.0
                weights.append(w)
        for i in range(rings - 1):
            for k in range(segments):
                a = base + i * segments + k
                b = base + i * segments + (k + 1) % segments
                c = a + segments
                d = b + segments
                faces.append([a, b, d])
                faces.append([a, d, c])
        # end caps
        for (ci, ring0) in ((p0, base), (p1, base + (rings - 1) * segments)):
            cap = len(verts)
            verts.append(ci)
            w = np.zeros(model.n_joints)
            if ring0 == base and parent_joint >= 0:
                w[joint], w[parent_joint] = 0.5, 0.5
            else:
                w[joint] = 1.0
            weights.append(w)
            for k in range(segments):
                a = ring0 + k
                b = ring0 + (k + 1) % segments
                faces.append([cap, b, a] if ring0 == base else [cap, a, b])

    name_to_idx = {jt.name: i for i, jt in enumerate(model.joints)}
    for j, jt in enumerate(model.joints):
        if jt.parent < 0 or not np.linalg.norm(jt.offset):
            continue
        p = jt.parent
        r = _BONE_RADII.get(jt.name, 0.05)
        rp = _BONE_RADII.get(model.joints[p].name, r)
        # the bone from parent p to joint j rides on joint p's frame
        add_tube(rest[p], rest[j], min(rp, r * 1.3), r, p, model.joints[p].parent)

    # head sphere on the head joint
    hj = name_to_idx["head"]
    c = rest[hj] + np.array([0, -0.06, 0])
    rh = _BONE_RADII["head"]
    base = len(verts)
    n_lat, n_lon = 6, 8
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for k in range(n_lon):
            lam = 2 * np.pi * k / n_lon
            verts.append(c + rh * np.array([np.sin(phi) * np.cos(lam),
                                            -np.cos(phi),
                                            np.sin(phi) * np.sin(lam)]))
            w = np.zeros(model.n_joints)
            w[hj] = 1.0
            weights.append(w)
    top, bot = len(verts), len(verts) + 1
    verts.append(c + rh * np.array([0, -1.0, 0]))
    verts.append(c + rh * np.array([0, 1.0, 0]))
    for _ in range(2):
        w = np.zeros(model.n_joints)
        w[hj] = 1.0
        weights.append(w)
    for i in range(n_lat - 2):
        for k in range(n_lon):
            a = base + i * n_lon + k
            b = base + i * n_lon + (k + 1) % n_lon
            faces.append([a, b, b + n_lon])
            faces.append([a, b + n_lon, a + n_lon])
    for k in range(n_lon):
        faces.append([top, base + (k + 1) % n_lon, base + k])
        last = base + (n_lat - 2) * n_lon
        faces.append([bot, last + k, last + (k + 1) % n_lon])

    return BodyMesh(np.array(verts), np.array(faces, dtype=np.int32), np.array(weights))


def default_intrinsics(sensor_size=(240, 180)) -> CameraIntrinsics:
    W, H = sensor_size
    f = 1.1 * W
    return CameraIntrinsics((f, f), (W / 2.0, H / 2.0), (W, H))


# ---------------------------------------------------------------------------
# model file (JSON): full skeleton + mesh + intrinsics
# ---------------------------------------------------------------------------

def save_model(path, model: SkeletonModel, mesh: BodyMesh, intrinsics: CameraIntrinsics):
    doc = {
        "joints": [
            {"name": jt.name, "parent": jt.parent, "offset": jt.offset.tolist(),
             "axes": jt.axes.tolist()}
            for jt in model.joints
        ],
        "angle_lower": model.angle_lower.tolist(),
        "angle_upper": model.angle_upper.tolist(),
        "face_landmarks": model.face_landmarks.tolist(),
        "head_joint": model.head_joint,
        "mesh": {
            "vertices": mesh.vertices.tolist(),
            "faces": mesh.faces.tolist(),
            "skinning_weights": mesh.skinning_weights.tolist(),
        },
        "intrinsics": {
            "focal": list(intrinsics.focal),
            "principal_point": list(intrinsics.principal_point),
            "sensor_size": list(intrinsics.sensor_size),
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_model(path):
    with open(path) as f:
        doc = json.load(f)
    joints = [Joint(d["name"], d["parent"], np.asarray(d["offset"], dtype=np.float64),
                    np.asarray(d["axes"], dtype=np.float64).reshape(-1, 3))
              for d in doc["joints"]]
    model = SkeletonModel(joints, doc["angle_lower"], doc["angle_upper"],
                          doc["face_landmarks"], doc["head_joint"])
    m = doc["mesh"]
    mesh = BodyMesh(np.asarray(m["vertices"], dtype=np.float64),
                    np.asarray(m["faces"], dtype=np.int32),
                    np.asarray(m["skinning_weights"], dtype=np.float64))
    i = doc["intrinsics"]
    intr = CameraIntrinsics(tuple(i["focal"]), tuple(i["principal_point"]),
                            tuple(i["sensor_size"]))
    return model, mesh, intr
