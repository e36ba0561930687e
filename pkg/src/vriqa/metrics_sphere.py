"""Omnidirectional PSNR variants: S-PSNR, WS-PSNR and CPP-PSNR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sphere
from .image import ImageBuffer
from .metrics2d import MetricResult, check_same_shape, mse_to_psnr


@dataclass(frozen=True)
class SphericalMetricConfig:
    s_psnr_samples: int = 10000
    interpolation: str = "bilinear"
    cpp_dims: tuple[int, int] | None = None  # (width, height); None -> source dimensions

    def __post_init__(self):
        if self.s_psnr_samples < 1:
            raise ValueError("s_psnr_samples must be >= 1")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if self.cpp_dims is not None and min(self.cpp_dims) < 1:
            raise ValueError("cpp_dims must be positive")


DEFAULT_CONFIG = SphericalMetricConfig()


def s_psnr(ref: ImageBuffer, dist: ImageBuffer, cfg: SphericalMetricConfig = DEFAULT_CONFIG) -> MetricResult:
    check_same_shape(ref, dist)
    lat, lon = sphere.fibonacci_sphere(cfg.s_psnr_samples)
    x, y = sphere.sphere_to_equirect(lat, lon, ref.width, ref.height)
    sample = sphere.bilinear_sample if cfg.interpolation == "bilinear" else sphere.nearest_sample
    a = sample(ref.data.astype(np.float64), x, y)
    b = sample(dist.data.astype(np.float64), x, y)
    mse = float(np.mean((a - b) ** 2))
    digest = f"points=fibonacci:{cfg.s_psnr_samples};interp={cfg.interpolation};peak=1.0"
    return MetricResult("s_psnr", mse_to_psnr(mse), digest, {"mse": mse})


def ws_weights(height: int) -> np.ndarray:
    """Per-row cosine-latitude weights of an equirectangular raster."""
    j = np.arange(height, dtype=np.float64)
    return np.cos((j + 0.5 - height / 2.0) * np.pi / height)


def ws_psnr(ref: ImageBuffer, dist: ImageBuffer) -> MetricResult:
    check_same_shape(ref, dist)
    err = (ref.data.astype(np.float64) - dist.data.astype(np.float64)) ** 2
    row_mse = err.mean(axis=(0, 2))
    w = ws_weights(ref.height)
    mse = float(np.sum(w * row_mse) / np.sum(w))
    return MetricResult("ws_psnr", mse_to_psnr(mse), "weights=cos((j+0.5-h/2)*pi/h);peak=1.0", {"mse": mse})


def cpp_psnr(ref: ImageBuffer, dist: ImageBuffer, cfg: SphericalMetricConfig = DEFAULT_CONFIG) -> MetricResult:
    check_same_shape(ref, dist)
    out_w, out_h = cfg.cpp_dims or (ref.width, ref.height)
    a, mask = sphere.cpp_resample(ref, out_w, out_h, cfg.interpolation)
    b, _ = sphere.cpp_resample(dist, out_w, out_h, cfg.interpolation)
    mse = float(np.mean((a[:, mask] - b[:, mask]) ** 2))
    digest = f"raster={out_w}x{out_h};interp={cfg.interpolation};out-of-footprint=excluded;peak=1.0"
    return MetricResult("cpp_psnr", mse_to_psnr(mse), digest, {"mse": mse, "valid_fraction": float(mask.mean())})
