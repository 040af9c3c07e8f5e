"""Minimal z-buffer triangle rasterizer (numba-compiled).

Produces per-pixel depth, face id and barycentric coordinates for a
projected mesh; used for silhouette extraction, feature-to-surface
anchoring and synthetic rendering.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .body import CameraIntrinsics, project


@njit(cache=True)
def _raster_core(uv, z, faces, W, H, depth, face_id, bary):
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if z[i0] <= 0 or z[i1] <= 0 or z[i2] <= 0:
            continue
        x0, y0 = uv[i0, 0], uv[i0, 1]
        x1, y1 = uv[i1, 0], uv[i1, 1]
        x2, y2 = uv[i2, 0], uv[i2, 1]
        xmin = int(max(0.0, np.floor(min(x0, min(x1, x2)))))
        xmax = int(min(W - 1.0, np.ceil(max(x0, max(x1, x2)))))
        ymin = int(max(0.0, np.floor(min(y0, min(y1, y2)))))
        ymax = int(min(H - 1.0, np.ceil(max(y0, max(y1, y2)))))
        if xmin > xmax or ymin > ymax:
            continue
        det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(det) < 1e-12:
            continue
        inv = 1.0 / det
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                qx = px + 0.5 - x0
                qy = py + 0.5 - y0
                b1 = (qx * (y2 - y0) - qy * (x2 - x0)) * inv
                b2 = (qy * (x1 - x0) - qx * (y1 - y0)) * inv
                b0 = 1.0 - b1 - b2
                if b0 < -1e-9 or b1 < -1e-9 or b2 < -1e-9:
                    continue
                zp = b0 * z[i0] + b1 * z[i1] + b2 * z[i2]
                if zp < depth[py, px]:
                    depth[py, px] = zp
                    face_id[py, px] = f
                    bary[py, px, 0] = b0
                    bary[py, px, 1] = b1
                    bary[py, px, 2] = b2


class RasterResult:
    __slots__ = ("depth", "face_id", "bary", "uv", "z")

    def __init__(self, depth, face_id, bary, uv, z):
        self.depth = depth      # (H,W) float64, inf where background
        self.face_id = face_id  # (H,W) int32, -1 where background
        self.bary = bary        # (H,W,3)
        self.uv = uv            # (V,2) projected vertices
        self.z = z              # (V,) vertex depths

    @property
    def mask(self):
        return self.face_id >= 0


def rasterize(vertices: np.ndarray, faces: np.ndarray,
              intrinsics: CameraIntrinsics) -> RasterResult:
    """Z-buffer rasterization of camera-frame vertices; pixel centers at +0.5."""
    W, H = intrinsics.sensor_size
    z = np.ascontiguousarray(vertices[:, 2])
    uv, _ = project(intrinsics, vertices, strict=False)
    uv = np.nan_to_num(uv, nan=-1e9)
    depth = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, dtype=np.int32)
    bary = np.zeros((H, W, 3))
    _raster_core(np.ascontiguousarray(uv), z,
                 np.ascontiguousarray(faces.astype(np.int64)), W, H,
                 depth, face_id, bary)
    return RasterResult(depth, face_id, bary, uv, z)
