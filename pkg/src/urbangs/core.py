"""Pinhole cameras, rigid transforms and the per-view image containers.

Conventions: right-handed frames, the camera looks down +z with image y
growing downward, world up is +z. Pixel (col, row) has its center at the
integer coordinate (col, row). Depth is camera-frame z, never ray length.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

BEHIND_EPS = 1e-6


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol)


@dataclass(frozen=True)
class RigidTransform:
    """x_dst = rotation @ x_src + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if not is_rotation(R):
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(-1)
        if m.size == 16:
            m = m.reshape(4, 4)[:3].reshape(-1)
        if m.size != 12:
            raise ValueError("expected a 3x4 or 4x4 row-major matrix")
        m = m.reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply `other` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; `pose` maps camera coordinates to world coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = None

    def __post_init__(self):
        if self.pose is None:
            object.__setattr__(self, "pose", RigidTransform.identity())
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def world_to_camera(self) -> RigidTransform:
        return self.pose.inverse()

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_pose(self, pose: RigidTransform) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def resized(self, width: int, height: int) -> "Camera":
        """Same camera sampled on a width x height grid (pixel centers at integers)."""
        sx = width / self.width
        sy = height / self.height
        return Camera(self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5,
                      (self.cy + 0.5) * sy - 0.5, width, height, self.pose)


class Projection(NamedTuple):
    pixel: np.ndarray
    depth: float


def project(camera: Camera, point) -> Projection | None:
    """Project one world point. Returns None when the point is behind the camera."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    x, y, z = camera.world_to_camera.apply(p)
    if z <= BEHIND_EPS:
        return None
    return Projection(np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy]), float(z))


def project_points(camera: Camera, points: np.ndarray):
    """Vectorized projection.

    Returns (pixels (N,2), depths (N,), in_front (N,) bool). Pixels of points
    behind the camera are NaN.
    """
    pc = camera.world_to_camera.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    front = z > BEHIND_EPS
    zs = np.where(front, z, 1.0)
    pix = np.stack([camera.fx * pc[:, 0] / zs + camera.cx, camera.fy * pc[:, 1] / zs + camera.cy], axis=1)
    pix[~front] = np.nan
    return pix, z, front


def unproject(camera: Camera, pixel, depth) -> np.ndarray:
    """Lift pixel(s) with planar depth(s) to world points.

    Accepts a single pixel (2,) + scalar depth, or arrays (N,2) + (N,).
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)) or not np.all(np.isfinite(depth)):
        raise ValueError("depth must be positive and finite")
    single = pixel.ndim == 1
    pix = pixel.reshape(-1, 2)
    d = depth.reshape(-1)
    pc = np.stack([(pix[:, 0] - camera.cx) / camera.fx * d,
                   (pix[:, 1] - camera.cy) / camera.fy * d, d], axis=1)
    world = camera.pose.apply(pc)
    return world[0] if single else world


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of (col, row) pixel-center coordinates."""
    cols, rows = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([cols, rows], axis=-1)


@dataclass(frozen=True)
class DepthMap:
    """Planar depth in meters; a pixel is valid iff its value is finite and > 0."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 2:
            raise ValueError("depth map must be 2-D")
        bad = ~np.isfinite(v) | (v <= 0)
        v[bad] = 0.0
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def invalid(cls, width: int, height: int) -> "DepthMap":
        return cls(np.zeros((height, width)))

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class Image:
    """Float image in [0, 1], shape (H, W) or (H, W, 3)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim not in (2, 3) or (v.ndim == 3 and v.shape[2] not in (1, 3)):
            raise ValueError("image must be (H, W), (H, W, 1) or (H, W, 3)")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        v = np.clip(v, 0.0, 1.0)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class MaskSet:
    sky: np.ndarray
    road: np.ndarray

    def __post_init__(self):
        sky = _frozen(self.sky, dtype=bool)
        road = _frozen(self.road, dtype=bool)
        if sky.shape != road.shape or sky.ndim != 2:
            raise ValueError("sky and road masks must be 2-D with equal shapes")
        if np.any(sky & road):
            raise ValueError("sky and road masks overlap")
        object.__setattr__(self, "sky", sky)
        object.__setattr__(self, "road", road)

    @classmethod
    def empty(cls, width: int, height: int) -> "MaskSet":
        z = np.zeros((height, width), dtype=bool)
        return cls(z, z)


def as_array(x) -> np.ndarray:
    if isinstance(x, (DepthMap, Image)):
        return x.values
    return np.asarray(x, dtype=np.float64)
