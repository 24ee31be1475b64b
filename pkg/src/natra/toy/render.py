"""Anti-aliased renderer for the toy shape world.

Pure float64 numpy, no library RNG: rendering is a deterministic function
of the factor vector. Shapes are drawn by supersampled membership tests so
edges are smooth enough for gradient-based models downstream.
"""

from __future__ import annotations

import colorsys
import math

import numpy as np

from .factors import FactorVector, SHAPE_NAMES

BACKGROUND = np.array([0.15, 0.15, 0.15])
SATURATION = 0.8
VALUE = 0.95
SUPERSAMPLE = 4

# Shape footprint in pixels at image size 32; scales linearly with size.
BASE_RADIUS = 12.0

# Footprints are equal-area across shapes so scale and class stay
# independent cues; the square uses the equal-area half-side.
# The square shades its leading half darker in the same hue: a
# low-frequency interior cue that survives the blur both the generator
# and the oracle augmentation apply, and the only cue that breaks the
# body's quarter-turn symmetry, so it pins square rotation over the
# full turn. Thin markers do not work here; they die under the blur.
SQUARE_HALF_SIDE = 0.5 * math.sqrt(math.pi)  # times radius
SHADE_VALUE = 0.55  # value multiplier on the shaded half


def hue_color(hue_degrees: float, value_scale: float = 1.0) -> np.ndarray:
    rgb = colorsys.hsv_to_rgb((hue_degrees % 360.0) / 360.0, SATURATION, VALUE * value_scale)
    return np.array(rgb)


def _subpixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    n = size * SUPERSAMPLE
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n
    return np.meshgrid(coords, coords, indexing="xy")


def _downsample(mask: np.ndarray, size: int) -> np.ndarray:
    return mask.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _shape_masks(factors: FactorVector, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Subpixel boolean masks for (shape body, shaded region)."""
    xs, ys = _subpixel_grid(size)
    cx = 0.5 + factors.pos_x
    cy = 0.5 + factors.pos_y
    dx = xs - cx
    dy = ys - cy
    radius = BASE_RADIUS * factors.scale / 32.0

    name = SHAPE_NAMES[factors.shape_class]
    theta = math.radians(factors.folded_rotation())
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # Rotate sample points into the shape frame.
    xr = cos_t * dx + sin_t * dy
    yr = -sin_t * dx + cos_t * dy

    no_shade = np.zeros_like(dx, dtype=bool)
    if name == "circle":
        return dx * dx + dy * dy <= radius * radius, no_shade
    if name == "square":
        half = SQUARE_HALF_SIDE * radius
        body = np.maximum(np.abs(xr), np.abs(yr)) <= half
        return body, body & (xr > 0.0)
    if name == "triangle":
        # Equilateral, circumradius = radius, one vertex pointing up.
        apothem = 0.5 * radius
        normals = [math.radians(90.0 + 120.0 * k) for k in range(3)]
        body = np.ones_like(dx, dtype=bool)
        for angle in normals:
            body &= math.cos(angle) * xr + math.sin(angle) * yr <= apothem
        return body, no_shade
    if name == "cross":
        bar_w = radius / 3.0
        body = ((np.abs(xr) <= radius) & (np.abs(yr) <= bar_w)) | (
            (np.abs(yr) <= radius) & (np.abs(xr) <= bar_w)
        )
        return body, no_shade
    raise ValueError(f"unknown shape {name!r}")


def shade_coverage(factors: FactorVector, size: int = 32) -> np.ndarray:
    """Per-pixel coverage of the shaded region, (size, size) in [0, 1].

    Zero everywhere for shapes that carry no shading. Useful for editing
    shading depth on a finished render: the image holds
    shade_cov * (SHADE_VALUE - 1) * fg on top of the body color, so adding
    shade_cov * (k - SHADE_VALUE) * fg re-renders the shade at depth k.
    """
    _, shade = _shape_masks(factors, size)
    return _downsample(shade.astype(np.float64), size)


def render(factors: FactorVector, size: int = 32) -> np.ndarray:
    """Render a factor vector to a (size, size, 3) float image in [0, 1]."""
    factors.validate()
    body, shade = _shape_masks(factors, size)
    body_cov = _downsample(body.astype(np.float64), size)
    shade_cov = _downsample(shade.astype(np.float64), size)

    fg = hue_color(factors.hue)
    shade_color = hue_color(factors.hue, value_scale=SHADE_VALUE)

    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = BACKGROUND
    image += body_cov[:, :, None] * (fg - BACKGROUND)
    image += shade_cov[:, :, None] * (shade_color - fg)
    return image


def foreground_pixel_count(image: np.ndarray, tol: float = 1e-9) -> int:
    """Number of pixels that differ from the flat background."""
    diff = np.abs(image - BACKGROUND[None, None, :]).max(axis=2)
    return int((diff > tol).sum())
