"""Pinhole cameras.  Pixel (row i, col j) has its centre at u = j + 0.5,
v = i + 0.5; a feature map downsampled by ``s`` uses K scaled by ``s``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass
class CameraView:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    near: float
    far: float
    image: np.ndarray | None = None
    name: str = "view"
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
            self.height, self.width = self.image.shape[-2:]
        if abs(self.K[2, 2] - 1.0) > 1e-12 or self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise GeometryError(f"{self.name}: degenerate intrinsics {self.K.tolist()}")
        if abs(np.linalg.det(self.K)) < 1e-12:
            raise GeometryError(f"{self.name}: singular intrinsics")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-9 or \
                abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise GeometryError(f"{self.name}: R is not a proper rotation")
        if not 0 < self.near < self.far:
            raise GeometryError(f"{self.name}: need 0 < near < far, got {self.near}, {self.far}")

    @classmethod
    def look_at(cls, eye, target, focal, height, width, near, far, up=(0, 1, 0), **kw):
        """Camera at ``eye`` looking at ``target``; +x right, +y down, +z forward."""
        eye, target = np.asarray(eye, float), np.asarray(target, float)
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, float))
        if np.linalg.norm(right) < 1e-9:
            raise GeometryError("look_at: up vector parallel to viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        K = np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1.0]])
        return cls(K=K, R=R, t=-R @ eye, near=near, far=far, height=height, width=width, **kw)

    @property
    def center(self):
        return -self.R.T @ self.t

    def scaled_K(self, scale):
        return np.diag([scale, scale, 1.0]) @ self.K

    def to_camera(self, points):
        return points @ self.R.T + self.t

    def project(self, points, scale=1.0):
        """World points (..., 3) -> pixel coords (..., 2) at ``scale`` and camera depth."""
        pc = self.to_camera(np.asarray(points, dtype=np.float64))
        z = pc[..., 2]
        proj = pc @ self.scaled_K(scale).T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = proj[..., :2] / z[..., None]
        return uv, z

    def backproject(self, uv, depth, scale=1.0):
        """Pixel coords (..., 2) at ``scale`` and camera depth -> world points."""
        uv = np.asarray(uv, dtype=np.float64)
        homog = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        rays = homog @ np.linalg.inv(self.scaled_K(scale)).T
        pc = rays * np.asarray(depth)[..., None]
        return (pc - self.t) @ self.R

    def pixel_rays(self, rows, cols):
        """World-space origins and unit directions through pixel centres."""
        rows, cols = np.asarray(rows), np.asarray(cols)
        uv = np.stack([cols + 0.5, rows + 0.5], axis=-1).astype(np.float64)
        pts = self.backproject(uv, np.ones(uv.shape[:-1]))
        dirs = pts - self.center
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        return np.broadcast_to(self.center, dirs.shape).copy(), dirs


def to_grid(uv):
    """Pixel coordinates -> interpolation grid coordinates (node at pixel centre)."""
    return uv - 0.5


def in_image(uv, h, w):
    return (uv[..., 0] >= 0) & (uv[..., 0] <= w) & (uv[..., 1] >= 0) & (uv[..., 1] <= h)
