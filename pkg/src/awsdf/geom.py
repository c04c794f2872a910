"""Camera geometry: poses, pinhole projection, depth backprojection, normal maps.

Conventions used throughout the package:
  - camera frame: x right, y down, z forward (optical axis)
  - depth images store z-depth in meters, 0 marks invalid pixels
  - poses are world-from-camera rigid transforms
  - vectors are plain float numpy arrays, rotations are (3,3) matrices
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-9


def unit(v: np.ndarray) -> np.ndarray:
    """Return v / ||v||. Raises on near-zero input rather than guessing."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero vector")
    return v / n


def normalize_rows(a: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalize (..., 3). Returns (unit rows, valid mask); invalid rows zeroed."""
    n = np.linalg.norm(a, axis=-1)
    ok = n > eps
    out = np.zeros_like(a)
    np.divide(a, n[..., None], out=out, where=ok[..., None])
    return out, ok


def is_rotation(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R)
    if R.shape != (3, 3):
        return False
    return (
        np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) < tol
    )


def rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    a = unit(axis)
    K = np.array(
        [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
    )
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def rotation_from_quat_xyzw(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a unit quaternion in (x, y, z, w) order."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"quaternion norm {n:.6g} is not 1")
    x, y, z, w = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_xyzw_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) from a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        w = 0.5 * np.sqrt(1.0 + t)
        s = 0.25 / w
        q = np.array(
            [(R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s, w]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
        q = np.empty(4)
        q[i] = 0.5 * s
        q[3] = (R[k, j] - R[j, k]) / (2.0 * s)
        q[j] = (R[j, i] + R[i, j]) / (2.0 * s)
        q[k] = (R[k, i] + R[i, k]) / (2.0 * s)
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def angle_between_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between two vectors in degrees."""
    d = np.clip(np.dot(unit(a), unit(b)), -1.0, 1.0)
    return float(np.degrees(np.arccos(d)))


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform: p_world = R @ p_cam + t."""

    rotation: np.ndarray  # (3,3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not is_rotation(R):
            raise ValueError("pose rotation is not a valid rotation matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def camera_center(self) -> np.ndarray:
        return self.translation

    @property
    def camera_up_world(self) -> np.ndarray:
        # camera y points down, so up in world coordinates is -R[:, 1]
        return -self.rotation[:, 1]

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def transform_dir(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        return d @ self.rotation.T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self @ other (apply other first)."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def ray_dirs_cam(self) -> np.ndarray:
        """Per-pixel ray directions in the camera frame, (H, W, 3).

        Parametrized so that point = t * dir has z == t, i.e. the ray parameter
        is exactly the stored z-depth.
        """
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = (uu - self.cx) / self.fx
        d[..., 1] = (vv - self.cy) / self.fy
        d[..., 2] = 1.0
        return d


def backproject(depth: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Lift a depth image to camera-frame points.

    Returns (points (H, W, 3), valid (H, W)). Points at invalid pixels are zero.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (K.height, K.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics")
    valid = depth > 0
    pts = K.ray_dirs_cam() * depth[..., None]
    pts[~valid] = 0.0
    return pts, valid


def project(p: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) -> pixel coords (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise ValueError("cannot project points with z <= 0")
    uv = np.empty(p.shape[:-1] + (2,))
    uv[..., 0] = K.fx * p[..., 0] / z + K.cx
    uv[..., 1] = K.fy * p[..., 1] / z + K.cy
    return uv


@dataclass
class NormalMap:
    """Per-pixel unit normals in the camera frame plus a validity mask."""

    normals: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool


def compute_normal_map(depth: np.ndarray, K: CameraIntrinsics) -> NormalMap:
    """Estimate camera-frame normals from a depth image.

    Central differences of backprojected neighbors; n = d/du x d/dv, then each
    normal is flipped to face the camera (n . p < 0 for the surface point p).
    A pixel is valid only if itself and its 4-neighborhood carry depth; the
    one-pixel image border is always invalid.
    """
    P, V = backproject(depth, K)
    H, W = V.shape
    normals = np.zeros((H, W, 3))
    valid = np.zeros((H, W), dtype=bool)
    if H < 3 or W < 3:
        return NormalMap(normals, valid)

    du = P[1:-1, 2:] - P[1:-1, :-2]  # (H-2, W-2, 3)
    dv = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(du, dv)
    n, ok = normalize_rows(n)

    center = V[1:-1, 1:-1]
    ok &= center & V[1:-1, 2:] & V[1:-1, :-2] & V[2:, 1:-1] & V[:-2, 1:-1]

    # orient toward the camera: flip where n points away from the origin
    away = np.einsum("ijk,ijk->ij", n, P[1:-1, 1:-1]) > 0
    n[away] *= -1.0
    n[~ok] = 0.0

    normals[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = ok
    return NormalMap(normals, valid)
