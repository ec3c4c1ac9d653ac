"""Synthetic desk-scale scenes: an analytically textured unit plane seen from a hemisphere.

The plane is z = 0 with x, y in [-0.5, 0.5]; everything off the plane is black.
Textures are grayscale and equal 1 everywhere at zero frequency.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from gaborsplat import dataio
from gaborsplat.geometry import Camera

PRESETS = ("stripes", "checker", "rings")
PLANE_HALF = 0.5
SUPERSAMPLE = 4


def texture(preset: str, x, y, freq: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if preset == "stripes":
        return 0.5 + 0.5 * np.cos(2 * np.pi * freq * x)
    if preset == "checker":
        cells = np.floor(freq * (x + PLANE_HALF)) + np.floor(freq * (y + PLANE_HALF))
        return 1.0 - np.mod(cells, 2.0)
    if preset == "rings":
        return 0.5 + 0.5 * np.cos(2 * np.pi * freq * np.hypot(x, y))
    raise ValueError(f"invalid preset {preset!r}; choose from {', '.join(PRESETS)}")


def hemisphere_cameras(
    n_views: int,
    width: int,
    height: int,
    seed: int,
    radius: float = 1.6,
    fov_x_deg: float = 50.0,
    min_elev_deg: float = 35.0,
    max_elev_deg: float = 75.0,
) -> list[Camera]:
    """Cameras on a hemisphere above the plane, all looking at its center.

    Azimuths are evenly spread with seeded jitter; elevations are seeded uniform.
    """
    rng = np.random.default_rng(seed)
    fx = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
    cams = []
    for i in range(n_views):
        az = 2 * math.pi * (i + rng.uniform(-0.3, 0.3)) / n_views
        el = math.radians(rng.uniform(min_elev_deg, max_elev_deg))
        eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye, np.zeros(3), np.array([0.0, 0.0, 1.0]), width, height, fx))
    return cams


def render_plane(camera: Camera, preset: str, freq: float, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Box-filtered ground truth: mean of ``supersample``^2 analytic ray hits per pixel."""
    texture(preset, 0.0, 0.0, freq)  # validates the preset
    h, w = camera.height, camera.width
    offs = (np.arange(supersample) + 0.5) / supersample
    px = (np.arange(w)[:, None] + offs[None, :]).ravel()
    py = (np.arange(h)[:, None] + offs[None, :]).ravel()
    gx, gy = np.meshgrid(px, py)
    dirs_cam = np.stack([(gx - camera.cx) / camera.fx, (gy - camera.cy) / camera.fy, np.ones_like(gx)], axis=-1)
    dirs = dirs_cam @ camera.rotation  # rotate to world: R^T d
    origin = camera.center
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dz
    hit_pt = origin + t[..., None] * dirs
    inside = (
        (np.abs(dz) > 1e-12)
        & (t > 0)
        & (np.abs(hit_pt[..., 0]) <= PLANE_HALF)
        & (np.abs(hit_pt[..., 1]) <= PLANE_HALF)
    )
    val = np.where(inside, texture(preset, hit_pt[..., 0], hit_pt[..., 1], freq), 0.0)
    val = val.reshape(h, supersample, w, supersample).mean(axis=(1, 3))
    return np.repeat(val[..., None], 3, axis=-1)


def grid_points(preset: str, freq: float, count: int, seed: int) -> np.ndarray:
    """About ``count`` jittered grid points on the plane, (M, 6) xyz + rgb."""
    k = max(1, int(round(math.sqrt(count))))
    rng = np.random.default_rng(seed)
    cell = 2 * PLANE_HALF / k
    centers = -PLANE_HALF + cell * (np.arange(k) + 0.5)
    gx, gy = np.meshgrid(centers, centers)
    xy = np.stack([gx.ravel(), gy.ravel()], axis=-1) + rng.uniform(-0.25, 0.25, (k * k, 2)) * cell
    val = texture(preset, xy[:, 0], xy[:, 1], freq)
    xyz = np.column_stack([xy, np.zeros(k * k)])
    return np.column_stack([xyz, np.repeat(val[:, None], 3, axis=1)])


def _c2w_gl(camera: Camera) -> np.ndarray:
    c2w = np.eye(4)
    c2w[:3, :3] = camera.rotation.T
    c2w[:3, 3] = camera.center
    return c2w @ dataio.GL_TO_CV  # GL_TO_CV is its own inverse


def write_synthetic(
    out_dir,
    preset: str = "stripes",
    n_views: int = 16,
    width: int = 128,
    height: int = 128,
    freq: float = 8.0,
    seed: int = 0,
    n_points: int = 64,
) -> Path:
    """Write ``transforms.json``, ``images/*.png`` and ``points3D.txt``; returns the JSON path."""
    texture(preset, 0.0, 0.0, freq)
    if n_views < 2:
        raise ValueError(f"need at least 2 views, got {n_views}")
    if width < 1 or height < 1:
        raise ValueError("resolution must be positive")
    if not math.isfinite(freq) or freq < 0:
        raise ValueError(f"frequency must be finite and non-negative, got {freq}")
    if n_points < 1:
        raise ValueError("need at least one init point")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    cams = hemisphere_cameras(n_views, width, height, seed)
    frames = []
    for i, cam in enumerate(cams):
        name = f"images/view_{i:03d}.png"
        dataio.save_image(out / name, render_plane(cam, preset, freq))
        frames.append({"file_path": name, "transform_matrix": _c2w_gl(cam).tolist()})
    c0 = cams[0]
    doc = {
        "fl_x": c0.fx, "fl_y": c0.fy, "cx": c0.cx, "cy": c0.cy, "w": width, "h": height,
        "preset": preset, "freq": freq, "seed": seed,
        "frames": frames,
    }
    path = out / "transforms.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    pts = grid_points(preset, freq, n_points, seed)
    dataio.write_points3d_txt(out / "points3D.txt", pts[:, :3], pts[:, 3:])
    return path
