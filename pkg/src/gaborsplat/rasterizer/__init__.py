"""Tiled splat rasterizer, its reverse pass, and an untiled reference."""

from gaborsplat.rasterizer.binning import cull_and_bin, sort_front_to_back
from gaborsplat.rasterizer.reference import reference_render
from gaborsplat.rasterizer.render import (
    GradientBuffer,
    NonFiniteGradientError,
    RenderOutput,
    render_backward,
    render_forward,
)

__all__ = [
    "GradientBuffer",
    "NonFiniteGradientError",
    "RenderOutput",
    "cull_and_bin",
    "reference_render",
    "render_backward",
    "render_forward",
    "sort_front_to_back",
]
