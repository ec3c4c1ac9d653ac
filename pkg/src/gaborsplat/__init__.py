"""Gabor splatting: flat Gaussian splats with multi-wave sinusoidal color."""

from gaborsplat.scene import MODES, Scene

__version__ = "0.1.0"

__all__ = ["MODES", "Scene", "__version__"]
