"""Pinhole camera with a world-to-camera pose.

Pose convention: `p_cam = R(q) @ p_world + t` with q a Hamilton unit
quaternion (w, x, y, z). Pixel (row i, col j) has center (x=j, y=i);
projection is x = fx * X/Z + cx, y = fy * Y/Z + cy with Z the camera-space
depth (positive in front of the camera).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Camera", "quat_to_matrix", "matrix_to_quat", "look_at_pose"]


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a Hamilton quaternion (w, x, y, z); q is normalized."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k]) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    view_id: int = 0

    def __post_init__(self):
        quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(quat)
        if abs(norm - 1.0) > 1e-3:
            raise ValueError(f"camera {self.view_id}: quaternion norm {norm} is not ~1")
        object.__setattr__(self, "quat", quat / norm)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"camera {self.view_id}: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(f"camera {self.view_id}: principal point outside image")

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.t

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.t


def look_at_pose(eye: np.ndarray, target: np.ndarray,
                 up: np.ndarray = (0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at `eye` looking at `target`.

    Camera axes: z forward, y down (image rows grow downward), x right.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    down = -(up - np.dot(up, forward) * forward)
    n = np.linalg.norm(down)
    if n < 1e-12:
        raise ValueError("up vector is parallel to the viewing direction")
    down = down / n
    right = np.cross(down, forward)
    R = np.stack([right, down, forward])
    return R, -R @ eye
