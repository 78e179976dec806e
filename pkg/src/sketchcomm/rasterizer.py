"""Differentiable stroke rasterization.

A stroke set (line segments or points in [-1,1]^2 canvas coordinates) becomes
a greyscale canvas: each primitive yields a squared-distance field over the
pixel grid, an exponential falloff turns it into an ink raster, and the
per-primitive rasters are combined with a soft-or product so that the canvas
is white (1) where no stroke passes and black (0) on stroke centerlines.
The whole pipeline is differentiable with respect to the coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class RasterConfig:
    width: int = 48
    height: int = 48
    sigma2: float = 5e-4  # falloff; controls visible thickness and gradient reach
    primitive: str = "line"

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.primitive not in ("line", "point"):
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError("canvas must be at least 1x1")

    @property
    def coords_per_stroke(self):
        return 4 if self.primitive == "line" else 2


def pixel_grid(width, height, dtype=np.float32):
    """Pixel-center coordinates: x = -1 + (2c+1)/W, y = -1 + (2r+1)/H.

    Returns (gx, gy), each (height, width); row 0 / col 0 sit near (-1,-1).
    """
    xs = (-1.0 + (2.0 * np.arange(width) + 1.0) / width).astype(dtype)
    ys = (-1.0 + (2.0 * np.arange(height) + 1.0) / height).astype(dtype)
    gx, gy = np.meshgrid(xs, ys)
    return gx, gy


def segment_dist2(coords, width, height):
    """Squared distance from each pixel center to each segment.

    ``coords``: Tensor (..., n, 4) holding (sx, sy, ex, ey) per stroke.
    Returns Tensor (..., n, H, W). Zero-length segments degrade to points.
    Endpoint gradients use the envelope form: with q the closest point at
    parameter t, d/ds = -2(p-q)(1-t) and d/de = -2(p-q)t, which is also the
    one-sided branch at the clamp boundaries.
    """
    coords = ad.as_tensor(coords)
    if coords.shape[-1] != 4:
        raise ad.ShapeError(
            f"segment_dist2: expected trailing dim 4, got {coords.shape}")
    gx, gy = pixel_grid(width, height, dtype=coords.dtype)
    # each endpoint component shaped (..., n, 1, 1) to broadcast over (H, W)
    sx = coords.data[..., 0][..., None, None]
    sy = coords.data[..., 1][..., None, None]
    ex = coords.data[..., 2][..., None, None]
    ey = coords.data[..., 3][..., None, None]
    dx, dy = ex - sx, ey - sy
    px, py = gx - sx, gy - sy
    len2 = dx * dx + dy * dy
    dot = px * dx + py * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(len2 > 0, dot / np.where(len2 > 0, len2, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    rx = px - t * dx  # p - q, with q = s + t*(e-s)
    ry = py - t * dy
    out = rx * rx + ry * ry

    def backward(g):
        grx, gry = 2.0 * g * rx, 2.0 * g * ry
        gsx = (-grx * (1.0 - t)).sum(axis=(-2, -1))
        gsy = (-gry * (1.0 - t)).sum(axis=(-2, -1))
        gex = (-grx * t).sum(axis=(-2, -1))
        gey = (-gry * t).sum(axis=(-2, -1))
        coords._accumulate(np.stack([gsx, gsy, gex, gey], axis=-1))

    return ad._make(out, (coords,), backward)


def point_dist2(coords, width, height):
    """Squared distance from each pixel center to each point.

    ``coords``: Tensor (..., n, 2); returns Tensor (..., n, H, W).
    """
    coords = ad.as_tensor(coords)
    if coords.shape[-1] != 2:
        raise ad.ShapeError(
            f"point_dist2: expected trailing dim 2, got {coords.shape}")
    gx, gy = pixel_grid(width, height, dtype=coords.dtype)
    cx = coords.data[..., 0][..., None, None]
    cy = coords.data[..., 1][..., None, None]
    rx, ry = gx - cx, gy - cy
    out = rx * rx + ry * ry

    def backward(g):
        gcx = (-2.0 * g * rx).sum(axis=(-2, -1))
        gcy = (-2.0 * g * ry).sum(axis=(-2, -1))
        coords._accumulate(np.stack([gcx, gcy], axis=-1))

    return ad._make(out, (coords,), backward)


def rasterize_primitive(dist2, config):
    """Eq-style falloff: R = exp(-dist2 / sigma2), values in (0, 1]."""
    return ad.exp(dist2 * (-1.0 / config.sigma2))


def compose_soft_or(rasters, shape=None):
    """Soft-or union: S = prod_i (1 - R_i). Empty input gives a white canvas.

    Accepts a list of (H, W) raster tensors or one tensor whose axis -3
    indexes the primitives. An empty list needs ``shape`` = (H, W).
    """
    if isinstance(rasters, (list, tuple)):
        if len(rasters) == 0:
            if shape is None:
                raise ValueError(
                    "compose_soft_or: shape required for an empty raster list")
            return Tensor(np.ones(shape, dtype=np.float32))
        shapes = {tuple(r.shape) for r in rasters}
        if len(shapes) > 1:
            raise ad.ShapeError(f"compose_soft_or: mismatched shapes {shapes}")
        stacked = ad.concat([ad.reshape(r, (1,) + tuple(r.shape))
                             for r in rasters], axis=0)
        return ad.prod(1.0 - stacked, axis=0)
    return ad.prod(1.0 - rasters, axis=-3)


def rasterize(coords, config):
    """StrokeSet -> SketchRaster, fully differentiable.

    ``coords``: Tensor (..., n, 4) for lines or (..., n, 2) for points;
    returns Tensor (..., H, W) with values in [0, 1], 1 = white.
    n = 0 yields an exactly all-white canvas.
    """
    coords = ad.as_tensor(coords)
    n = coords.shape[-2] if coords.data.ndim >= 2 else 0
    if n == 0:
        lead = coords.shape[:-2]
        return Tensor(np.ones(lead + (config.height, config.width),
                              dtype=coords.dtype))
    if config.primitive == "line":
        d2 = segment_dist2(coords, config.width, config.height)
    else:
        d2 = point_dist2(coords, config.width, config.height)
    return compose_soft_or(rasterize_primitive(d2, config))


def rasterize_points(coords, config):
    """Point-primitive rasterization with the same falloff and soft-or."""
    cfg = RasterConfig(config.width, config.height, config.sigma2, "point")
    return rasterize(coords, cfg)


def raster_backward(coords_value, upstream, config):
    """Vector-Jacobian product of the raster w.r.t. stroke coordinates.

    ``upstream``: array (..., H, W) of dLoss/dS. Returns an array shaped like
    ``coords_value``.
    """
    coords = Tensor(coords_value, requires_grad=True)
    s = rasterize(coords, config)
    loss = ad.sum_(s * ad.as_tensor(np.asarray(upstream, dtype=s.dtype)))
    loss.backward()
    if coords.grad is None:
        return np.zeros_like(coords.data)
    return coords.grad


def raster_to_bytes(raster):
    """Quantize a raster to 8-bit greyscale: value = round(255 * pixel)."""
    pix = np.asarray(raster.data if isinstance(raster, Tensor) else raster)
    return np.clip(np.rint(pix * 255.0), 0, 255).astype(np.uint8)


def save_png(raster, path):
    from PIL import Image

    arr = raster_to_bytes(raster)
    if arr.ndim != 2:
        raise ValueError(f"save_png expects a single H x W raster, got {arr.shape}")
    Image.fromarray(arr, mode="L").save(path, format="PNG")
