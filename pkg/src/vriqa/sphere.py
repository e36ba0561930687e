"""Equirectangular <-> sphere mapping, Fibonacci sphere sampling and the Craster parabolic projection.

All raster coordinates use the pixel-centre convention: pixel ``(u, v)`` covers
``[u, u+1) x [v, v+1)`` and its centre sits at ``(u + 0.5, v + 0.5)``.
Continuous coordinates returned by :func:`sphere_to_equirect` are expressed in
pixel-index units, so a pixel centre maps back to an integer.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .image import ImageBuffer

SQRT_3_OVER_PI = math.sqrt(3.0 / math.pi)
SQRT_3PI = math.sqrt(3.0 * math.pi)
# Craster footprint covers 4*pi of a 2*sqrt(3pi) x sqrt(3pi) box.
CPP_FOOTPRINT_RATIO = 4.0 * math.pi / (2.0 * SQRT_3PI * SQRT_3PI)


class SphereDir(NamedTuple):
    lat: float
    lon: float

    def to_vector(self) -> np.ndarray:
        return np.asarray(to_unit_vector(self.lat, self.lon))


class PlanePoint(NamedTuple):
    x: float
    y: float


def to_unit_vector(lat, lon):
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def equirect_to_sphere(u, v, w: int, h: int):
    """Pixel centre -> (lat, lon). Scalars give a :class:`SphereDir`, arrays a tuple of arrays."""
    u_arr, v_arr = np.asarray(u), np.asarray(v)
    if np.any(u_arr < 0) or np.any(u_arr >= w) or np.any(v_arr < 0) or np.any(v_arr >= h):
        raise IndexError(f"pixel ({u}, {v}) outside {w}x{h} raster")
    lon = ((u_arr + 0.5) / w - 0.5) * 2.0 * math.pi
    lat = (0.5 - (v_arr + 0.5) / h) * math.pi
    if lon.ndim == 0:
        return SphereDir(float(lat), float(lon))
    return lat, lon


def sphere_to_equirect(lat, lon, w: int, h: int):
    """(lat, lon) -> continuous (col, row); longitude wraps into [-0.5, w - 0.5)."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    x = (lon / (2.0 * math.pi) + 0.5) * w - 0.5
    x = np.mod(x + 0.5, w) - 0.5
    y = (0.5 - lat / math.pi) * h - 0.5
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def fibonacci_sphere(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Golden-angle lattice of ``n`` near-uniform directions; returns (lat, lon) arrays."""
    if n < 1:
        raise ValueError("need at least one sample")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    lat = np.arcsin(z)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    lon = np.mod(i * golden + math.pi, 2.0 * math.pi) - math.pi
    return lat, lon


def fibonacci_directions(n: int) -> list[SphereDir]:
    lat, lon = fibonacci_sphere(n)
    return [SphereDir(float(a), float(b)) for a, b in zip(lat, lon)]


def bilinear_sample(img: ImageBuffer | np.ndarray, x, y) -> np.ndarray:
    """Bilinear lookup at continuous (col, row); columns wrap around the seam, rows clamp.

    Returns shape (channels,) + shape(x).
    """
    data = img.data if isinstance(img, ImageBuffer) else img
    _, h, w = data.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa = np.mod(x0, w)
    xb = np.mod(x0 + 1, w)
    ya = y0
    yb = np.minimum(y0 + 1, h - 1)
    top = data[:, ya, xa] * (1.0 - fx) + data[:, ya, xb] * fx
    bot = data[:, yb, xa] * (1.0 - fx) + data[:, yb, xb] * fx
    return top * (1.0 - fy) + bot * fy


def nearest_sample(img: ImageBuffer | np.ndarray, x, y) -> np.ndarray:
    data = img.data if isinstance(img, ImageBuffer) else img
    _, h, w = data.shape
    xi = np.mod(np.floor(np.asarray(x) + 0.5).astype(np.int64), w)
    yi = np.clip(np.floor(np.asarray(y) + 0.5).astype(np.int64), 0, h - 1)
    return data[:, yi, xi]


def cpp_forward(lat, lon):
    """Craster parabolic projection of (lat, lon) in radians."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    x = SQRT_3_OVER_PI * lon * (2.0 * np.cos(2.0 * lat / 3.0) - 1.0)
    y = SQRT_3PI * np.sin(lat / 3.0)
    if x.ndim == 0:
        return PlanePoint(float(x), float(y))
    return x, y


def cpp_inverse(x, y):
    """Plane -> (lat, lon, inside) where ``inside`` marks points on the projection footprint."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = np.clip(y / SQRT_3PI, -0.5, 0.5)
    lat = 3.0 * np.arcsin(s)
    denom = SQRT_3_OVER_PI * (2.0 * np.cos(2.0 * lat / 3.0) - 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lon = np.where(denom > 0, x / np.where(denom > 0, denom, 1.0), np.inf * np.sign(x))
    inside = (np.abs(y) <= SQRT_3PI / 2.0) & (np.abs(lon) <= math.pi)
    return lat, lon, inside


def cpp_area_scale(lat, lon, h: float = 1e-5):
    """Central-difference |det J| / cos(lat) of :func:`cpp_forward`; 1 everywhere for an equal-area map."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    x_lp, y_lp = cpp_forward(lat + h, lon)
    x_lm, y_lm = cpp_forward(lat - h, lon)
    x_op, y_op = cpp_forward(lat, lon + h)
    x_om, y_om = cpp_forward(lat, lon - h)
    dx_dlat = (np.asarray(x_lp) - x_lm) / (2 * h)
    dy_dlat = (np.asarray(y_lp) - y_lm) / (2 * h)
    dx_dlon = (np.asarray(x_op) - x_om) / (2 * h)
    dy_dlon = (np.asarray(y_op) - y_om) / (2 * h)
    return np.abs(dx_dlon * dy_dlat - dx_dlat * dy_dlon) / np.cos(lat)


def cpp_grid(out_w: int, out_h: int):
    """Sphere directions and footprint mask for every pixel centre of a CPP raster."""
    if out_w < 1 or out_h < 1:
        raise ValueError("CPP raster dimensions must be positive")
    i = np.arange(out_w, dtype=np.float64)
    j = np.arange(out_h, dtype=np.float64)
    px = ((i + 0.5) / out_w - 0.5) * 2.0 * SQRT_3PI
    py = (0.5 - (j + 0.5) / out_h) * SQRT_3PI
    gx, gy = np.meshgrid(px, py)
    return cpp_inverse(gx, gy)


def cpp_resample(img: ImageBuffer, out_w: int | None = None, out_h: int | None = None,
                 interpolation: str = "bilinear") -> tuple[np.ndarray, np.ndarray]:
    """Remap an equirectangular image onto a Craster parabolic raster.

    Returns planar (C, out_h, out_w) data and a boolean footprint mask; pixels
    outside the footprint are zero.
    """
    out_w = img.width if out_w is None else out_w
    out_h = img.height if out_h is None else out_h
    lat, lon, inside = cpp_grid(out_w, out_h)
    out = np.zeros((img.channels, out_h, out_w), dtype=np.float64)
    x, y = sphere_to_equirect(lat[inside], lon[inside], img.width, img.height)
    sampler = bilinear_sample if interpolation == "bilinear" else nearest_sample
    out[:, inside] = sampler(img, x, y)
    return out, inside
