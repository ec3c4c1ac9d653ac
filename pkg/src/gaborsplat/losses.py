"""Training losses and image metrics.

Losses come in pairs: ``foo(...)`` returns the value and ``foo_grad(...)``
returns ``(value, gradient)`` w.r.t. the rendered input(s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from gaborsplat.geometry import Camera

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DEPTH_EPS = 1e-6
NORMAL_EPS = 1e-20


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    w_dist: float = 1000.0
    w_normal: float = 0.05
    normal_start_iter: int = 7000

    def __post_init__(self):
        for name in ("lambda_dssim", "w_dist", "w_normal", "normal_start_iter"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


def _check_same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def l1_loss(rendered, target) -> float:
    rendered, target = _check_same_shape(rendered, target)
    return float(np.mean(np.abs(rendered - target)))


def l1_loss_grad(rendered, target):
    rendered, target = _check_same_shape(rendered, target)
    diff = rendered - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _gaussian_window():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_WINDOW = _gaussian_window()
_HALF = SSIM_WINDOW // 2


def _filter_valid(img):
    """Separable Gaussian filter over axes 0 and 1, keeping only full windows."""
    out = correlate1d(img, _WINDOW, axis=0, mode="constant")
    out = correlate1d(out, _WINDOW, axis=1, mode="constant")
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _filter_valid_adjoint(grad, shape):
    full = np.zeros(shape)
    full[_HALF:-_HALF, _HALF:-_HALF] = grad
    # the window is symmetric, so correlation is its own adjoint up to the crop
    out = correlate1d(full, _WINDOW, axis=0, mode="constant")
    return correlate1d(out, _WINDOW, axis=1, mode="constant")


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _check_window(x):
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {x.shape[0]}x{x.shape[1]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")


def _ssim_terms(x, y):
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_x, mu_y = _filter_valid(x), _filter_valid(y)
    e_xx, e_yy, e_xy = _filter_valid(x * x), _filter_valid(y * y), _filter_valid(x * y)
    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * (e_xy - mu_x * mu_y) + c2
    b1 = mu_x**2 + mu_y**2 + c1
    b2 = (e_xx - mu_x**2) + (e_yy - mu_y**2) + c2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim(rendered, target) -> float:
    """Mean SSIM over channels and valid 11x11 window positions (dynamic range 1)."""
    x, y = _check_same_shape(_as_hwc(rendered), _as_hwc(target))
    _check_window(x)
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_grad(rendered, target):
    """SSIM and its gradient w.r.t. ``rendered``."""
    x, y = _check_same_shape(_as_hwc(rendered), _as_hwc(target))
    _check_window(x)
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    scale = 1.0 / s.size
    d_mu_x = (2 * mu_y * a2 - 2 * mu_y * a1) / (b1 * b2) - s * (2 * mu_x / b1 - 2 * mu_x / b2)
    d_e_xx = -s / b2
    d_e_xy = 2 * a1 / (b1 * b2)
    grad = (
        _filter_valid_adjoint(d_mu_x * scale, x.shape)
        + 2 * x * _filter_valid_adjoint(d_e_xx * scale, x.shape)
        + y * _filter_valid_adjoint(d_e_xy * scale, x.shape)
    )
    return float(np.mean(s)), grad.reshape(np.shape(rendered))


def dssim_loss(rendered, target) -> float:
    return (1.0 - ssim(rendered, target)) / 2.0


def dssim_loss_grad(rendered, target):
    value, grad = ssim_grad(rendered, target)
    return (1.0 - value) / 2.0, -grad / 2.0


def distortion_per_ray(weights, depths) -> np.ndarray:
    """sum_ij w_i w_j |z_i - z_j| along the last axis (absent splats have weight 0)."""
    w = np.asarray(weights, dtype=np.float64)
    z = np.asarray(depths, dtype=np.float64)
    return np.einsum("...i,...j,...ij->...", w, w, np.abs(z[..., :, None] - z[..., None, :]))


def distortion_loss(weights, depths) -> float:
    """Mean over rays of the pairwise depth-distortion penalty."""
    return float(np.mean(distortion_per_ray(weights, depths)))


def _depth_normals(depth, alpha, camera):
    dirs = camera.pixel_directions()
    safe = alpha > DEPTH_EPS
    depth_n = np.where(safe, depth / np.where(safe, alpha, 1.0), 0.0)
    pts = depth_n[..., None] * dirs
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    # y-down/x-right image axes: dy x dx faces the camera
    cr = np.cross(dy, dx)
    norm = np.sqrt(np.sum(cr * cr, axis=-1, keepdims=True) + NORMAL_EPS)
    return cr / norm, (dirs, safe, depth_n, dx, dy, norm)


def depth_normals(expected_depth, accum_alpha, camera: Camera) -> np.ndarray:
    """Camera-facing normals from finite differences of the alpha-normalized depth.

    Returns the (H-2, W-2, 3) interior; border pixels have no normal.
    """
    return _depth_normals(np.asarray(expected_depth, float), np.asarray(accum_alpha, float), camera)[0]


def normal_consistency_loss(normal_map, expected_depth, accum_alpha, camera: Camera) -> float:
    """Mean over interior pixels of sum_k w_k (1 - n_k . N_depth) = A - N_rendered . N_depth."""
    nd = depth_normals(expected_depth, accum_alpha, camera)
    a = np.asarray(accum_alpha, float)[1:-1, 1:-1]
    nm = np.asarray(normal_map, float)[1:-1, 1:-1]
    return float(np.mean(a - np.sum(nm * nd, axis=-1)))


def normal_consistency_loss_grad(normal_map, expected_depth, accum_alpha, camera: Camera):
    """Returns (value, d/d normal_map, d/d expected_depth, d/d accum_alpha)."""
    depth = np.asarray(expected_depth, float)
    alpha = np.asarray(accum_alpha, float)
    normal_map = np.asarray(normal_map, float)
    nd, (dirs, safe, depth_n, dx, dy, norm) = _depth_normals(depth, alpha, camera)
    a_in = alpha[1:-1, 1:-1]
    nm = normal_map[1:-1, 1:-1]
    value = float(np.mean(a_in - np.sum(nm * nd, axis=-1)))
    g = 1.0 / a_in.size

    g_alpha = np.zeros_like(alpha)
    g_alpha[1:-1, 1:-1] = g
    g_normal = np.zeros_like(normal_map)
    g_normal[1:-1, 1:-1] = -g * nd
    g_nd = -g * nm
    g_cr = (g_nd - nd * np.sum(nd * g_nd, axis=-1, keepdims=True)) / norm
    # cr = dy x dx
    g_dy = np.cross(dx, g_cr)
    g_dx = np.cross(g_cr, dy)
    g_pts = np.zeros(depth.shape + (3,))
    g_pts[1:-1, 2:] += g_dx
    g_pts[1:-1, :-2] -= g_dx
    g_pts[2:, 1:-1] += g_dy
    g_pts[:-2, 1:-1] -= g_dy
    g_dn = np.sum(g_pts * dirs, axis=-1)
    inv_a = np.where(safe, 1.0 / np.where(safe, alpha, 1.0), 0.0)
    g_depth = g_dn * inv_a
    g_alpha -= g_dn * depth_n * inv_a
    return value, g_normal, g_depth, g_alpha


def psnr(rendered, target) -> float:
    """PSNR in dB of [0, 1]-clamped images; ``inf`` for identical images."""
    x, y = _check_same_shape(rendered, target)
    return psnr_from_mse(float(np.mean((np.clip(x, 0, 1) - np.clip(y, 0, 1)) ** 2)))


def psnr_from_mse(mse: float) -> float:
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def format_metric(value: float) -> str:
    return "inf" if math.isinf(value) else repr(float(value))
