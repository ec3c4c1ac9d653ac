"""Untiled per-pixel renderer used as an oracle for the tile kernels.

Works in world space with unit rays and the scalar kernel functions, so it
shares no code with the numba path beyond the raw-parameter activation.
"""

from __future__ import annotations

import numpy as np

from gaborsplat.gabor_kernel import GaborPrimitive, eval_alpha_hat, eval_color
from gaborsplat.geometry import PARALLEL_EPS, Camera, SplatFrame, pixel_rays
from gaborsplat.rasterizer import config
from gaborsplat.rasterizer.binning import depth_order
from gaborsplat.rasterizer.render import RenderOutput
from gaborsplat.scene import Scene, activate_arrays, check_mode


def reference_render(scene: Scene, camera: Camera, mode: str | None = None) -> RenderOutput:
    mode = check_mode(scene.mode if mode is None else mode)
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    depth_img = np.zeros((h, w))
    normal_img = np.zeros((h, w, 3))
    dist_img = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int64)
    trans = np.ones((h, w))
    active = np.ones((h, w), dtype=bool)
    history = []  # (weight, depth) of earlier contributors

    act = activate_arrays(scene)
    origin, dirs = pixel_rays(camera)
    z_per_t = dirs @ camera.forward
    pix = np.stack(np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5), axis=-1)
    _, center_z = camera.project(act.q) if len(scene) else (None, np.zeros(0))

    for k in depth_order(center_z, center_z > config.NEAR):
        frame = SplatFrame(act.q[k], act.rot[k][:, 0], act.rot[k][:, 1], act.scale[k, 0], act.scale[k, 1])
        prim = GaborPrimitive(
            frame, float(act.alpha[k]), act.color_a[k], act.color_b[k], list(zip(act.w[k], act.f[k], act.phi[k]))
        )
        n = frame.n
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((frame.q - origin) @ n) / denom
        hit = (np.abs(denom) >= PARALLEL_EPS) & (t > 0)
        t = np.where(hit, t, 0.0)
        offset = origin + t[..., None] * dirs - frame.q
        u = offset @ frame.t_u / frame.s_u
        v = offset @ frame.t_v / frame.s_v
        center_px, _ = camera.project(frame.q)
        a = prim.alpha * eval_alpha_hat(u, v, pix - center_px)
        use = active & hit & (a >= config.ALPHA_MIN)
        a = np.where(use, a, 0.0)
        wt = a * trans
        z = t * z_per_t
        facing = -n if n @ (frame.q - origin) > 0 else n
        color += eval_color(u, v, prim, mode) * wt[..., None]
        depth_img += z * wt
        normal_img += (camera.rotation @ facing) * wt[..., None]
        for w_prev, z_prev in history:
            dist_img += 2.0 * wt * w_prev * np.abs(z - z_prev)
        history.append((wt, z))
        count += use
        trans = trans * (1.0 - a)
        active &= trans >= config.T_STOP
    return RenderOutput(color, 1.0 - trans, depth_img, normal_img, dist_img, count, mode)
