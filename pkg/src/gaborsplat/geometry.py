"""Pinhole cameras, pixel rays, quaternion frames and ray/splat intersection.

Camera convention: x right, y down, z forward (COLMAP/OpenCV). The stored
pose maps world points into the camera frame: ``x_cam = R @ x_world + t``.
Pixel (i, j) is sampled at its center ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"camera size must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("camera pose must be finite")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9 or np.linalg.det(rot) < 0:
            raise ValueError("camera rotation is not a proper orthonormal matrix")

    @classmethod
    def look_at(cls, eye, target, up, width, height, fx, fy=None, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` whose +z axis points at ``target``; ``up`` maps to -y."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(
            width,
            height,
            fx,
            fx if fy is None else fy,
            width / 2 if cx is None else cx,
            height / 2 if cy is None else cy,
            rot,
            -rot @ eye,
        )

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_to_cam(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points):
        """World points (..., 3) -> (pixel coords (..., 2), camera z (...))."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        pix = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return pix, z

    def pixel_directions(self) -> np.ndarray:
        """Camera-space ray directions with z = 1 for every pixel center, shape (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        out = np.ones((self.height, self.width, 3))
        out[..., 0] = xs[None, :]
        out[..., 1] = ys[:, None]
        return out


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray


def pixel_ray(camera: Camera, px) -> Ray:
    """World-space unit ray through the center of pixel ``px = (x, y)``."""
    x, y = px
    d_cam = np.array([(x + 0.5 - camera.cx) / camera.fx, (y + 0.5 - camera.cy) / camera.fy, 1.0])
    d = camera.rotation.T @ d_cam
    return Ray(camera.center, d / np.linalg.norm(d))


def pixel_rays(camera: Camera) -> Ray:
    """Rays for the full image; origin (3,), directions (H, W, 3) normalized."""
    d = camera.pixel_directions() @ camera.rotation
    return Ray(camera.center, d / np.linalg.norm(d, axis=-1, keepdims=True))


def quat_to_rotmat(quat) -> np.ndarray:
    """(..., 4) quaternions (w, x, y, z), any norm -> (..., 3, 3) rotation matrices."""
    quat = np.asarray(quat, dtype=np.float64)
    norm = np.linalg.norm(quat, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValueError("degenerate rotation: quaternion has zero or non-finite norm")
    w, x, y, z = np.moveaxis(quat / norm, -1, 0)
    rot = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return rot.reshape(quat.shape[:-1] + (3, 3))


def quat_to_rotmat_vjp(quat, grad_rot) -> np.ndarray:
    """Pull a gradient w.r.t. the rotation matrix back to the raw quaternion."""
    quat = np.asarray(quat, dtype=np.float64)
    norm = np.linalg.norm(quat, axis=-1, keepdims=True)
    qn = quat / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = np.asarray(grad_rot, dtype=np.float64)
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    gn = np.stack([gw, gx, gy, gz], axis=-1)
    # d(q/|q|)/dq = (I - qn qn^T) / |q|
    return (gn - qn * np.sum(gn * qn, axis=-1, keepdims=True)) / norm


def frame_from_quaternion(quat):
    """Return the (t_u, t_v, n) columns of the rotation of a nonzero quaternion."""
    rot = quat_to_rotmat(np.asarray(quat, dtype=np.float64).reshape(4))
    return rot[:, 0].copy(), rot[:, 1].copy(), rot[:, 2].copy()


@dataclass(frozen=True)
class SplatFrame:
    q: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    s_u: float
    s_v: float

    def __post_init__(self):
        for name in ("q", "t_u", "t_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if not (self.s_u > 0 and self.s_v > 0):
            raise ValueError(f"splat scales must be positive, got {self.s_u}, {self.s_v}")
        if abs(np.linalg.norm(self.t_u) - 1) > 1e-6 or abs(np.linalg.norm(self.t_v) - 1) > 1e-6:
            raise ValueError("splat axes must be unit vectors")
        if abs(float(self.t_u @ self.t_v)) > 1e-6:
            raise ValueError("splat axes must be orthogonal")

    @classmethod
    def from_quaternion(cls, q, quat, s_u, s_v) -> "SplatFrame":
        t_u, t_v, _ = frame_from_quaternion(quat)
        return cls(q, t_u, t_v, s_u, s_v)

    @property
    def n(self) -> np.ndarray:
        return np.cross(self.t_u, self.t_v)

    def point(self, u, v) -> np.ndarray:
        """Surface point at local coordinates (u, v)."""
        u = np.asarray(u, dtype=np.float64)[..., None]
        v = np.asarray(v, dtype=np.float64)[..., None]
        return self.q + u * self.s_u * self.t_u + v * self.s_v * self.t_v


class Intersection(NamedTuple):
    u: float
    v: float
    depth: float


def ray_splat_intersect(ray: Ray, frame: SplatFrame) -> Optional[Intersection]:
    """Exact ray/plane hit expressed in the splat's local coordinates.

    ``depth`` is the distance along the (unit) ray. Returns None when the ray
    is parallel to the splat plane or the plane lies behind the ray origin.
    """
    n = frame.n
    d = np.asarray(ray.direction, dtype=np.float64)
    denom = float(n @ d)
    if abs(denom) < PARALLEL_EPS:
        return None
    t = float(n @ (frame.q - ray.origin)) / denom
    if not t > 0:
        return None
    offset = ray.origin + t * d - frame.q
    return Intersection(float(frame.t_u @ offset) / frame.s_u, float(frame.t_v @ offset) / frame.s_v, t)
