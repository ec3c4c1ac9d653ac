"""Rasterizer constants kept in one place."""

import math

from gaborsplat.gabor_kernel import SCREEN_SIGMA

TILE_SIZE = 16
NEAR = 0.01
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
# Fraction of the cutoff radius added so binning stays conservative under rounding.
BOUND_MARGIN = 1e-4
TWO_SCREEN_VAR = 2.0 * SCREEN_SIGMA**2

MODE_CODES = {"gabor": 0, "baselineA": 1, "baselineB": 2, "baselineC": 3, "gaussian_only": 4}


def cutoff_radius(alpha: float) -> float:
    """Local-coordinate radius beyond which alpha * G < ALPHA_MIN (0 if never reached)."""
    ratio = alpha / ALPHA_MIN
    return math.sqrt(2.0 * math.log(ratio)) if ratio > 1.0 else 0.0
