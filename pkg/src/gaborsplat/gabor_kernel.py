"""Alpha falloff and multi-wave Gabor color of a single primitive.

A primitive's color at local coordinates (u, v) is a weighted sum of N
cosine waves, each blending two colors::

    theta_i = 2 pi f_i <d_i, (u, v)> + phi_i,   d_i = (cos(i pi / N), sin(i pi / N))
    c(u, v) = sum_i w_i * (c_a (1 + cos theta_i) / 2 + c_b (1 - cos theta_i) / 2)

Colors are not clamped here. All functions broadcast over array-valued u, v.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from gaborsplat.geometry import SplatFrame
from gaborsplat.scene import check_mode

SCREEN_SIGMA = 0.70710678  # px; std of the screen-space low-pass term
TWO_PI = 2.0 * np.pi


class WaveParam(NamedTuple):
    w: float
    f: float
    phi: float


@dataclass(frozen=True)
class GaborPrimitive:
    frame: SplatFrame
    alpha: float
    c_a: np.ndarray
    c_b: np.ndarray
    waves: tuple

    def __post_init__(self):
        c_a = np.asarray(self.c_a, dtype=np.float64).reshape(3)
        c_b = np.asarray(self.c_b, dtype=np.float64).reshape(3)
        object.__setattr__(self, "c_a", c_a)
        object.__setattr__(self, "c_b", c_b)
        waves = tuple(WaveParam(*map(float, wave)) for wave in self.waves)
        object.__setattr__(self, "waves", waves)
        if not waves:
            raise ValueError("a primitive needs at least one wave")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"opacity must lie in (0, 1), got {self.alpha}")
        if np.any(c_a < 0) or np.any(c_a > 1) or np.any(c_b < 0) or np.any(c_b > 1):
            raise ValueError("colors must lie in [0, 1]")
        if not np.all(np.isfinite(np.array(waves))):
            raise ValueError("wave parameters must be finite")

    @property
    def n_waves(self) -> int:
        return len(self.waves)

    def wave_arrays(self):
        arr = np.array(self.waves, dtype=np.float64)
        return arr[:, 0], arr[:, 1], arr[:, 2]


def eval_gaussian(u, v):
    return np.exp(-(np.square(u) + np.square(v)) / 2.0)


def eval_screen_gaussian(d_px):
    d_px = np.asarray(d_px, dtype=np.float64)
    return np.exp(-np.sum(np.square(d_px), axis=-1) / (2.0 * SCREEN_SIGMA**2))


def eval_alpha_hat(u, v, d_px):
    """Object-space Gaussian, floored by a screen-space Gaussian around the projected center."""
    return np.maximum(eval_gaussian(u, v), eval_screen_gaussian(d_px))


def eval_alpha_hat_and_grads(u, v, d_px):
    """Returns (value, d/du, d/dv, d/d_px). Ties resolve to the object-space branch."""
    d_px = np.asarray(d_px, dtype=np.float64)
    g = eval_gaussian(u, v)
    s = eval_screen_gaussian(d_px)
    obj = g >= s
    value = np.where(obj, g, s)
    du = np.where(obj, -np.asarray(u) * g, 0.0)
    dv = np.where(obj, -np.asarray(v) * g, 0.0)
    dd = np.where(obj[..., None], 0.0, -d_px / SCREEN_SIGMA**2 * s[..., None])
    return value, du, dv, dd


def wave_direction(i: int, n: int):
    if not 0 <= i < n:
        raise IndexError(f"wave index {i} out of range for N={n}")
    ang = i * np.pi / n
    return np.array([np.cos(ang), np.sin(ang)])


def wave_directions(n: int, mode: str = "gabor") -> np.ndarray:
    """(N, 2) wave directions; baselineB pins every wave to the local u-axis."""
    check_mode(mode)
    if mode == "baselineB":
        return np.tile([1.0, 0.0], (n, 1))
    return np.stack([wave_direction(i, n) for i in range(n)])


def eval_phase(i, u, v, wave: WaveParam, n: int, direction=None):
    dx, dy = wave_direction(i, n) if direction is None else direction
    return TWO_PI * wave.f * (dx * np.asarray(u) + dy * np.asarray(v)) + wave.phi


def _mode_waves(prim: GaborPrimitive, mode: str):
    w, f, phi = prim.wave_arrays()
    if mode == "baselineA":
        w, f, phi = w[:1], f[:1], phi[:1]
    if mode == "baselineC":
        phi = np.zeros_like(phi)
    return w, f, phi, wave_directions(len(w), mode)


def _color(u, v, prim, mode):
    w, f, phi, dirs = _mode_waves(prim, mode)
    u = np.asarray(u, dtype=np.float64)[..., None]
    v = np.asarray(v, dtype=np.float64)[..., None]
    theta = TWO_PI * f * (dirs[:, 0] * u + dirs[:, 1] * v) + phi
    cos_t = np.cos(theta)
    mix_a = np.sum(w * ((1.0 + cos_t) / 2.0), axis=-1)
    mix_b = np.sum(w * ((1.0 - cos_t) / 2.0), axis=-1)
    color = mix_a[..., None] * prim.c_a + mix_b[..., None] * prim.c_b
    return color, theta, cos_t, mix_a, mix_b, (w, f, phi, dirs)


def eval_color(u, v, prim: GaborPrimitive, mode: str = "gabor"):
    """RGB color (..., 3) of ``prim`` at local coordinates (u, v)."""
    check_mode(mode)
    if mode == "gaussian_only":
        return np.broadcast_to(prim.c_a, np.broadcast(np.asarray(u), np.asarray(v)).shape + (3,)).copy()
    return _color(u, v, prim, mode)[0]


@dataclass
class ColorGrads:
    """Color and its partials at a batch of points.

    ``d_c_a``/``d_c_b`` are the scalar factors of the (diagonal) Jacobians
    w.r.t. the two colors. Wave partials have shape (..., N, 3) and are zero
    for waves the mode does not use.
    """

    color: np.ndarray
    d_c_a: np.ndarray
    d_c_b: np.ndarray
    d_w: np.ndarray
    d_f: np.ndarray
    d_phi: np.ndarray
    d_u: np.ndarray
    d_v: np.ndarray


def eval_color_and_grads(u, v, prim: GaborPrimitive, mode: str = "gabor") -> ColorGrads:
    check_mode(mode)
    shape = np.broadcast(np.asarray(u), np.asarray(v)).shape
    n_all = prim.n_waves
    d_w = np.zeros(shape + (n_all, 3))
    d_f = np.zeros(shape + (n_all, 3))
    d_phi = np.zeros(shape + (n_all, 3))
    if mode == "gaussian_only":
        zeros3 = np.zeros(shape + (3,))
        return ColorGrads(
            eval_color(u, v, prim, mode), np.ones(shape), np.zeros(shape), d_w, d_f, d_phi, zeros3, zeros3.copy()
        )
    color, theta, cos_t, mix_a, mix_b, (w, f, phi, dirs) = _color(u, v, prim, mode)
    n = len(w)
    g_a = (1.0 + cos_t) / 2.0
    d_w[..., :n, :] = g_a[..., None] * prim.c_a + (1.0 - g_a)[..., None] * prim.c_b
    # d color / d theta_i = -w_i sin(theta_i) / 2 * (c_a - c_b)
    d_theta = (-0.5 * w * np.sin(theta))[..., None] * (prim.c_a - prim.c_b)
    u_ = np.asarray(u, dtype=np.float64)[..., None]
    v_ = np.asarray(v, dtype=np.float64)[..., None]
    proj = dirs[:, 0] * u_ + dirs[:, 1] * v_
    d_f[..., :n, :] = d_theta * (TWO_PI * proj)[..., None]
    if mode != "baselineC":
        d_phi[..., :n, :] = d_theta
    d_u = np.sum(d_theta * (TWO_PI * f * dirs[:, 0])[:, None], axis=-2)
    d_v = np.sum(d_theta * (TWO_PI * f * dirs[:, 1])[:, None], axis=-2)
    return ColorGrads(color, mix_a, mix_b, d_w, d_f, d_phi, d_u, d_v)
