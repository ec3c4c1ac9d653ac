"""Tiled forward rendering and the matching reverse pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gaborsplat.geometry import Camera, quat_to_rotmat_vjp
from gaborsplat.rasterizer import _kernels as K
from gaborsplat.rasterizer import config
from gaborsplat.rasterizer.binning import Prepared, TileBins, bin_prepared, prepare
from gaborsplat.scene import ParamLayout, Scene


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, primitive: int, parameter: str):
        self.primitive = primitive
        self.parameter = parameter
        super().__init__(f"non-finite gradient for primitive {primitive}, parameter {parameter}")


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3), linear and unclamped
    accum_alpha: np.ndarray  # (H, W)
    expected_depth: np.ndarray  # (H, W), alpha-weighted camera z
    normal_map: np.ndarray  # (H, W, 3), alpha-weighted camera-facing normals, camera frame
    distortion: np.ndarray  # (H, W), sum_ij w_i w_j |z_i - z_j|
    count: np.ndarray  # (H, W) contributing splats
    mode: str = "gabor"
    prepared: Prepared | None = field(default=None, repr=False)
    bins: TileBins | None = field(default=None, repr=False)


@dataclass
class GradientBuffer:
    """dL/d(raw parameter) for every primitive, same layout as ``Scene.params``."""

    data: np.ndarray
    layout: ParamLayout

    @classmethod
    def zeros(cls, scene: Scene) -> "GradientBuffer":
        return cls(np.zeros_like(scene.params), scene.layout)

    def get(self, name: str) -> np.ndarray:
        return self.data[:, self.layout[name]]

    def check_finite(self) -> None:
        bad = np.argwhere(~np.isfinite(self.data))
        if len(bad):
            prim, col = bad[0]
            raise NonFiniteGradientError(int(prim), self.layout.column_names()[col])


def _kernel_args(prep: Prepared, bins: TileBins, camera: Camera):
    return (
        bins.offsets, bins.prims, bins.tiles_x, bins.tile_size, camera.width, camera.height,
        float(camera.fx), float(camera.fy), float(camera.cx), float(camera.cy),
        np.ascontiguousarray(prep.qc), prep.tu, prep.tv, prep.nflip, prep.su, prep.sv,
        np.ascontiguousarray(prep.mean2d), np.ascontiguousarray(prep.alpha),
        np.ascontiguousarray(prep.color_a), np.ascontiguousarray(prep.color_b),
        prep.w, prep.f, prep.phi, prep.dirs, config.MODE_CODES[prep.mode],
        config.ALPHA_MIN, config.T_STOP, config.TWO_SCREEN_VAR,
    )


def render_forward(scene: Scene, camera: Camera, mode: str | None = None, tile_size: int = config.TILE_SIZE) -> RenderOutput:
    prep = prepare(scene, camera, mode)
    bins = bin_prepared(prep, camera, tile_size)
    h, w = camera.height, camera.width
    out = RenderOutput(
        color=np.zeros((h, w, 3)),
        accum_alpha=np.zeros((h, w)),
        expected_depth=np.zeros((h, w)),
        normal_map=np.zeros((h, w, 3)),
        distortion=np.zeros((h, w)),
        count=np.zeros((h, w), dtype=np.int64),
        mode=prep.mode,
        prepared=prep,
        bins=bins,
    )
    if len(bins.prims):
        K.forward_tiles(
            *_kernel_args(prep, bins, camera),
            out.color, out.accum_alpha, out.expected_depth, out.normal_map, out.distortion, out.count,
        )
    return out


def _image_grad(grad, shape):
    if grad is None:
        return np.zeros(shape)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != shape:
        raise ValueError(f"gradient image has shape {grad.shape}, expected {shape}")
    return np.ascontiguousarray(grad)


def render_backward(
    scene: Scene,
    camera: Camera,
    grad_color,
    forward: RenderOutput,
    *,
    grad_depth=None,
    grad_normal=None,
    grad_alpha=None,
    grad_distortion=None,
) -> GradientBuffer:
    """Gradient of a scalar loss w.r.t. all raw parameters.

    ``grad_*`` are dL/d(buffer) images for the buffers of ``forward``; missing
    ones are treated as zero.
    """
    prep, bins = forward.prepared, forward.bins
    h, w = camera.height, camera.width
    buf = GradientBuffer.zeros(scene)
    if not len(bins.prims):
        return buf
    m = prep.w.shape[1]
    entry_grads = np.zeros((len(bins.prims), K.G_WAVES + 3 * m))
    K.backward_tiles(
        *_kernel_args(prep, bins, camera),
        _image_grad(grad_color, (h, w, 3)),
        _image_grad(grad_depth, (h, w)),
        _image_grad(grad_normal, (h, w, 3)),
        _image_grad(grad_alpha, (h, w)),
        _image_grad(grad_distortion, (h, w)),
        entry_grads,
    )
    g = K.reduce_entries(bins.prims, entry_grads, len(scene))
    _chain_to_raw(g, prep, camera, buf)
    buf.check_finite()
    return buf


def _chain_to_raw(g: np.ndarray, prep: Prepared, camera: Camera, buf: GradientBuffer) -> None:
    act = prep.act
    rc = camera.rotation
    qc = prep.qc
    g_qc = g[:, K.G_QC : K.G_QC + 3].copy()
    # projected center -> camera-space center
    valid = prep.valid
    z = np.where(valid, qc[:, 2], 1.0)
    g_mx, g_my = g[:, K.G_MEAN], g[:, K.G_MEAN + 1]
    g_qc[:, 0] += g_mx * camera.fx / z
    g_qc[:, 1] += g_my * camera.fy / z
    g_qc[:, 2] -= (g_mx * camera.fx * qc[:, 0] + g_my * camera.fy * qc[:, 1]) / z**2

    # camera frame -> world frame (x_c = R x_w): g_w = g_c @ R
    g_rot = np.zeros((len(qc), 3, 3))
    g_rot[:, :, 0] = g[:, K.G_TU : K.G_TU + 3] @ rc
    g_rot[:, :, 1] = g[:, K.G_TV : K.G_TV + 3] @ rc
    g_rot[:, :, 2] = (g[:, K.G_N : K.G_N + 3] * prep.flip[:, None]) @ rc
    buf.data[:, buf.layout["q"]] = g_qc @ rc
    buf.data[:, buf.layout["quat"]] = quat_to_rotmat_vjp(act.quat, g_rot)
    buf.data[:, buf.layout["scale"]] = g[:, [K.G_SU, K.G_SV]] * act.scale
    buf.data[:, buf.layout["alpha"]] = (g[:, K.G_ALPHA] * act.alpha * (1.0 - act.alpha))[:, None]
    buf.data[:, buf.layout["color_a"]] = g[:, K.G_CA : K.G_CA + 3] * act.color_a * (1.0 - act.color_a)
    if prep.mode == "gaussian_only":
        return
    buf.data[:, buf.layout["color_b"]] = g[:, K.G_CB : K.G_CB + 3] * act.color_b * (1.0 - act.color_b)
    m = prep.w.shape[1]
    buf.data[:, buf.layout["w"].start : buf.layout["w"].start + m] = g[:, K.G_WAVES : K.G_WAVES + m]
    buf.data[:, buf.layout["f"].start : buf.layout["f"].start + m] = g[:, K.G_WAVES + m : K.G_WAVES + 2 * m]
    if prep.mode != "baselineC":
        buf.data[:, buf.layout["phi"].start : buf.layout["phi"].start + m] = g[:, K.G_WAVES + 2 * m :]
