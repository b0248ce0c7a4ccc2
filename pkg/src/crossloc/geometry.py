"""Rigid transforms, pinhole projection and rotation metrics.

Poses map world coordinates into the camera frame: ``x_cam = R @ x_world + t``.
Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

Z_MIN = 1e-6


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ D @ Vt


def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return quat_to_rot(q)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """World-to-camera rigid transform ``[R | t]``."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            R = orthonormalize(R)
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) world points into the camera frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def __eq__(self, other):
        if not isinstance(other, PoseSE3):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return f"PoseSE3(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose mapping ``x -> a(b(x))``."""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: PoseSE3) -> PoseSE3:
    Rt = a.rotation.T
    return PoseSE3(Rt, -Rt @ a.translation)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> PoseSE3:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``.

    Camera axes follow the computer-vision convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return PoseSE3(R, -R @ eye)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def project(point, pose: PoseSE3, K: CameraIntrinsics) -> np.ndarray | None:
    """Project one world point to pixel coordinates.

    Returns None when the point is not in front of the camera (depth <= 1e-6 m).
    """
    Xc = pose.apply(np.asarray(point, dtype=np.float64).reshape(3))
    if Xc[2] <= Z_MIN:
        return None
    return np.array([K.fx * Xc[0] / Xc[2] + K.cx, K.fy * Xc[1] / Xc[2] + K.cy])


def project_points(points: np.ndarray, pose: PoseSE3, K: CameraIntrinsics):
    """Vectorized projection.

    Args:
        points: (N, 3) world points.

    Returns:
        uv: (N, 2) pixels, NaN for points behind the camera.
        depth: (N,) camera-frame depths.
    """
    Xc = pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = Xc[:, 2]
    front = z > Z_MIN
    uv = np.full((len(Xc), 2), np.nan)
    zf = z[front]
    uv[front, 0] = K.fx * Xc[front, 0] / zf + K.cx
    uv[front, 1] = K.fy * Xc[front, 1] / zf + K.cy
    return uv, z


def backproject(pixel, depth: float, pose: PoseSE3, K: CameraIntrinsics) -> np.ndarray:
    """World point seen at ``pixel`` with camera-frame depth ``depth``."""
    u, v = pixel
    Xc = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    return pose.rotation.T @ (Xc - pose.translation)


def rotation_error_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle of the relative rotation ``Ra^T Rb`` in degrees."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(a: PoseSE3, b: PoseSE3) -> float:
    """Distance in meters between the two camera centers."""
    return float(np.linalg.norm(a.center() - b.center()))
