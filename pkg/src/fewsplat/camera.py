"""Pinhole camera model with rigid world-to-camera extrinsics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ValidationError

_ORTHO_TOL = 1e-6


@dataclass
class CameraModel:
    """Pinhole intrinsics plus a world-to-camera rigid transform.

    Pixel (row i, col j) is sampled at continuous coordinates (j + 0.5, i + 0.5),
    so a principal point at the image center is cx = width / 2.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation_w2c: NDArray[np.float64]
    translation_w2c: NDArray[np.float64]
    znear: float = 0.01
    zfar: float = 100.0

    def __post_init__(self):
        self.rotation_w2c = np.asarray(self.rotation_w2c, dtype=np.float64).reshape(3, 3)
        self.translation_w2c = np.asarray(self.translation_w2c, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.znear < self.zfar):
            raise ValidationError(f"need 0 < znear < zfar, got {self.znear}, {self.zfar}")
        R = self.rotation_w2c
        if not np.allclose(R @ R.T, np.eye(3), atol=_ORTHO_TOL):
            raise ValidationError("rotation_w2c is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=_ORTHO_TOL):
            raise ValidationError("rotation_w2c must have determinant +1")

    @property
    def center(self) -> NDArray[np.float64]:
        """Camera center in world coordinates."""
        return -self.rotation_w2c.T @ self.translation_w2c

    def world_to_camera(self, points: NDArray) -> NDArray[np.float64]:
        """Map (N, 3) world points into the camera frame (+z forward)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_w2c.T + self.translation_w2c

    def scaled(self, divisor: int) -> "CameraModel":
        """Camera for an image downscaled by an integer factor."""
        if divisor < 1:
            raise ValidationError(f"resolution divisor must be >= 1, got {divisor}")
        if divisor == 1:
            return self
        return CameraModel(
            fx=self.fx / divisor,
            fy=self.fy / divisor,
            cx=self.cx / divisor,
            cy=self.cy / divisor,
            width=self.width // divisor,
            height=self.height // divisor,
            rotation_w2c=self.rotation_w2c,
            translation_w2c=self.translation_w2c,
            znear=self.znear,
            zfar=self.zfar,
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0), **kwargs) -> CameraModel:
    """Build a CameraModel positioned at `eye` looking toward `target`.

    Camera frame: +z forward (toward target), +x right, +y down, matching
    the image convention where v grows downward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)

    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValidationError("look_at eye and target coincide")
    forward = forward / norm
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-12:
        raise ValidationError("look_at up vector is parallel to the view direction")
    right = right / rnorm
    down = np.cross(forward, right)

    R = np.stack([right, down, forward], axis=0)
    t = -R @ eye
    return CameraModel(rotation_w2c=R, translation_w2c=t, **kwargs)


def camera_centers(cameras) -> NDArray[np.float64]:
    """Stack camera centers, (N, 3)."""
    return np.stack([cam.center for cam in cameras], axis=0)


def bounding_sphere_radius(cameras) -> float:
    """Radius of the camera-center bounding sphere (about the centroid)."""
    centers = camera_centers(cameras)
    centroid = centers.mean(axis=0)
    return float(np.linalg.norm(centers - centroid, axis=1).max())
