"""Per-view preprocessing: camera-space splats, screen bounds, tile lists."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from gaborsplat.gabor_kernel import wave_directions
from gaborsplat.geometry import Camera
from gaborsplat.rasterizer import config
from gaborsplat.scene import Activated, Scene, activate_arrays, check_mode


@dataclass
class Prepared:
    """Camera-space splat data consumed by the tile kernels."""

    act: Activated
    mode: str
    qc: np.ndarray
    tu: np.ndarray
    tv: np.ndarray
    nflip: np.ndarray  # camera-facing normal
    flip: np.ndarray  # +1 / -1 applied to the raw normal
    su: np.ndarray
    sv: np.ndarray
    alpha: np.ndarray
    color_a: np.ndarray
    color_b: np.ndarray
    w: np.ndarray
    f: np.ndarray
    phi: np.ndarray
    dirs: np.ndarray
    mean2d: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    rect: np.ndarray  # (P, 4) pixel ranges x0, x1, y0, y1 (half open)


def prepare(scene: Scene, camera: Camera, mode: str | None = None) -> Prepared:
    mode = check_mode(scene.mode if mode is None else mode)
    act = activate_arrays(scene)
    rc = camera.rotation
    qc = act.q @ rc.T + camera.translation
    rot_c = rc[None] @ act.rot if len(scene) else np.zeros((0, 3, 3))
    tu, tv, nc = rot_c[:, :, 0], rot_c[:, :, 1], rot_c[:, :, 2]
    flip = np.where(np.sum(nc * qc, axis=1) > 0, -1.0, 1.0)
    depth = qc[:, 2]
    valid = depth > config.NEAR
    with np.errstate(divide="ignore", invalid="ignore"):
        mean2d = np.stack([camera.fx * qc[:, 0] / depth + camera.cx, camera.fy * qc[:, 1] / depth + camera.cy], axis=1)
    mean2d[~valid] = 0.0

    w, f, phi = act.w, act.f, act.phi
    if mode == "baselineA":
        w, f, phi = w[:, :1], f[:, :1], phi[:, :1]
    if mode == "baselineC":
        phi = np.zeros_like(phi)
    dirs = wave_directions(w.shape[1], mode)

    prep = Prepared(
        act=act,
        mode=mode,
        qc=qc,
        tu=np.ascontiguousarray(tu),
        tv=np.ascontiguousarray(tv),
        nflip=np.ascontiguousarray(nc * flip[:, None]),
        flip=flip,
        su=np.ascontiguousarray(act.scale[:, 0]),
        sv=np.ascontiguousarray(act.scale[:, 1]),
        alpha=act.alpha,
        color_a=act.color_a,
        color_b=act.color_b,
        w=np.ascontiguousarray(w),
        f=np.ascontiguousarray(f),
        phi=np.ascontiguousarray(phi),
        dirs=np.ascontiguousarray(dirs),
        mean2d=mean2d,
        depth=depth,
        valid=valid,
        rect=np.zeros((len(scene), 4), dtype=np.int64),
    )
    prep.rect = screen_rects(prep, camera)
    return prep


def screen_rects(prep: Prepared, camera: Camera) -> np.ndarray:
    """Pixel ranges that can receive alpha >= ALPHA_MIN from each splat.

    The object-space part is the tight bounding box of the projected disk of
    radius ``cutoff_radius(alpha)`` (a conic); the screen-space filter adds a
    square around the projected center.
    """
    n = len(prep.depth)
    rect = np.zeros((n, 4), dtype=np.int64)
    margin = 1.0 + config.BOUND_MARGIN
    k = camera.intrinsics
    for i in range(n):
        if not prep.valid[i]:
            continue
        r_obj = config.cutoff_radius(prep.alpha[i]) * margin
        if r_obj == 0.0:
            continue
        r_scr = np.sqrt(config.TWO_SCREEN_VAR) * r_obj / np.sqrt(2.0)
        mx, my = prep.mean2d[i]
        xmin, xmax, ymin, ymax = mx - r_scr, mx + r_scr, my - r_scr, my + r_scr
        m = np.stack([r_obj * prep.su[i] * prep.tu[i], r_obj * prep.sv[i] * prep.tv[i], prep.qc[i]], axis=1)
        h = k @ m
        fmat = np.array([1.0, 1.0, -1.0])
        d22 = np.sum(h[2] * h[2] * fmat)
        if d22 < 0:
            cxy = np.array([np.sum(h[0] * h[2] * fmat), np.sum(h[1] * h[2] * fmat)]) / d22
            half2 = cxy**2 - np.array([np.sum(h[0] * h[0] * fmat), np.sum(h[1] * h[1] * fmat)]) / d22
            half = np.sqrt(np.maximum(half2, 0.0)) * margin + 1e-6
            xmin, xmax = min(xmin, cxy[0] - half[0]), max(xmax, cxy[0] + half[0])
            ymin, ymax = min(ymin, cxy[1] - half[1]), max(ymax, cxy[1] + half[1])
        else:
            # disk reaches the camera plane: its image is unbounded
            xmin, xmax, ymin, ymax = -np.inf, np.inf, -np.inf, np.inf
        x0 = int(np.clip(np.ceil(xmin - 0.5), 0, camera.width))
        x1 = int(np.clip(np.floor(xmax - 0.5) + 1, 0, camera.width))
        y0 = int(np.clip(np.ceil(ymin - 0.5), 0, camera.height))
        y1 = int(np.clip(np.floor(ymax - 0.5) + 1, 0, camera.height))
        if x0 < x1 and y0 < y1:
            rect[i] = (x0, x1, y0, y1)
    return rect


def depth_order(depth: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Indices sorted by ascending depth, ties by ascending index."""
    idx = np.arange(len(depth))
    if valid is not None:
        idx = idx[valid]
    return idx[np.lexsort((idx, depth[idx]))]


def sort_front_to_back(indices, depth) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    return indices[np.lexsort((indices, depth[indices]))]


@dataclass
class TileBins:
    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray  # (n_tiles + 1,)
    prims: np.ndarray  # flat primitive indices, front to back within each tile

    def tile_list(self, t: int) -> np.ndarray:
        return self.prims[self.offsets[t] : self.offsets[t + 1]]

    def lists(self) -> list[np.ndarray]:
        return [self.tile_list(t) for t in range(self.tiles_x * self.tiles_y)]


@njit(cache=True)
def _fill_bins(order, rect, tile_size, tiles_x, tiles_y):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles, dtype=np.int64)
    for k in order:
        x0, x1, y0, y1 = rect[k, 0], rect[k, 1], rect[k, 2], rect[k, 3]
        if x0 >= x1 or y0 >= y1:
            continue
        for ty in range(y0 // tile_size, (y1 - 1) // tile_size + 1):
            for tx in range(x0 // tile_size, (x1 - 1) // tile_size + 1):
                counts[ty * tiles_x + tx] += 1
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    for t in range(n_tiles):
        offsets[t + 1] = offsets[t] + counts[t]
    prims = np.empty(offsets[n_tiles], dtype=np.int64)
    fill = offsets[:-1].copy()
    for k in order:
        x0, x1, y0, y1 = rect[k, 0], rect[k, 1], rect[k, 2], rect[k, 3]
        if x0 >= x1 or y0 >= y1:
            continue
        for ty in range(y0 // tile_size, (y1 - 1) // tile_size + 1):
            for tx in range(x0 // tile_size, (x1 - 1) // tile_size + 1):
                t = ty * tiles_x + tx
                prims[fill[t]] = k
                fill[t] += 1
    return offsets, prims


def bin_prepared(prep: Prepared, camera: Camera, tile_size: int = config.TILE_SIZE) -> TileBins:
    tiles_x = -(-camera.width // tile_size)
    tiles_y = -(-camera.height // tile_size)
    order = depth_order(prep.depth, prep.valid).astype(np.int64)
    offsets, prims = _fill_bins(order, prep.rect, tile_size, tiles_x, tiles_y)
    return TileBins(tile_size, tiles_x, tiles_y, offsets, prims)


def cull_and_bin(scene: Scene, camera: Camera, tile_size: int = config.TILE_SIZE) -> list[np.ndarray]:
    """Per-tile primitive index lists (row-major tiles), each sorted front to back."""
    return bin_prepared(prepare(scene, camera), camera, tile_size).lists()
