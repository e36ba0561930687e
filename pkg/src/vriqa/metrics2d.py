"""Rectilinear full-reference metrics: PSNR, SSIM, MS-SSIM and pixel-domain VIF."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .image import ImageBuffer, to_luma

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class MetricResult:
    metric_id: str
    value: float
    params_digest: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.value)

    def json_value(self):
        """Value for JSON output; infinity becomes the string ``"inf"``."""
        if math.isinf(self.value):
            return "inf" if self.value > 0 else "-inf"
        return self.value

    def __float__(self):
        return float(self.value)


def check_same_shape(ref: ImageBuffer, dist: ImageBuffer) -> None:
    if ref.shape != dist.shape:
        raise ValueError(f"dimension mismatch: {ref.shape} vs {dist.shape}")


def mse_to_psnr(mse: float, peak: float = 1.0) -> float:
    if mse <= 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _planes(ref: ImageBuffer, dist: ImageBuffer, luma: bool):
    if luma:
        ref, dist = to_luma(ref), to_luma(dist)
    return ref.data.astype(np.float64), dist.data.astype(np.float64)


def psnr(ref: ImageBuffer, dist: ImageBuffer, luma: bool = False) -> MetricResult:
    check_same_shape(ref, dist)
    a, b = _planes(ref, dist, luma)
    mse = float(np.mean((a - b) ** 2))
    return MetricResult("psnr", mse_to_psnr(mse), f"peak=1.0;mse=mean-over-{'luma' if luma else 'channels'}",
                        {"mse": mse})


# ---------------------------------------------------------------------- SSIM


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation of a (H, W) array keeping only fully covered positions."""
    k = len(kernel)
    if img.shape[0] < k or img.shape[1] < k:
        raise ValueError(f"image {img.shape} smaller than {k}x{k} window")
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    lo = k // 2
    hi = k - 1 - lo
    return out[lo:img.shape[0] - hi, lo:img.shape[1] - hi]


def ssim_maps(x: np.ndarray, y: np.ndarray, window: int = 11, sigma: float = 1.5,
              k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0):
    """Local SSIM and contrast-structure maps of two (H, W) planes."""
    g = gaussian_kernel1d(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = filter_valid(x, g)
    mu_y = filter_valid(y, g)
    sxx = filter_valid(x * x, g) - mu_x * mu_x
    syy = filter_valid(y * y, g) - mu_y * mu_y
    sxy = filter_valid(x * y, g) - mu_x * mu_y
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return lum * cs, cs


SSIM_DIGEST = "window=gaussian11;sigma=1.5;K1=0.01;K2=0.03;L=1;luma=BT.601;valid"


def ssim(ref: ImageBuffer, dist: ImageBuffer) -> MetricResult:
    check_same_shape(ref, dist)
    a, b = _planes(ref, dist, True)
    smap, _ = ssim_maps(a[0], b[0])
    return MetricResult("ssim", float(np.mean(smap)), SSIM_DIGEST)


def downsample2(x: np.ndarray) -> np.ndarray:
    """2x2 mean followed by decimation (odd trailing row/col dropped)."""
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(ref: ImageBuffer, dist: ImageBuffer, weights=MS_SSIM_WEIGHTS) -> MetricResult:
    """Five-scale MS-SSIM; negative per-scale terms are clipped to zero before exponentiation."""
    check_same_shape(ref, dist)
    scales = len(weights)
    if min(ref.height, ref.width) < 11 * 2 ** (scales - 1):
        raise ValueError(f"image {ref.width}x{ref.height} too small for {scales} scales")
    a, b = _planes(ref, dist, True)
    x, y = a[0], b[0]
    terms = []
    for s in range(scales):
        smap, cs = ssim_maps(x, y)
        terms.append(float(np.mean(smap if s == scales - 1 else cs)))
        if s < scales - 1:
            x, y = downsample2(x), downsample2(y)
    value = 1.0
    for t, wgt in zip(terms, weights):
        value *= max(t, 0.0) ** wgt
    digest = f"{SSIM_DIGEST};scales={scales};weights={','.join(map(str, weights))};down=mean2x2"
    return MetricResult("ms_ssim", value, digest, {"terms": terms})


# ----------------------------------------------------------------------- VIFp

VIF_SIGMA_NSQ = 2.0
VIF_EPS = 1e-10


def vifp(ref: ImageBuffer, dist: ImageBuffer, scales: int = 4) -> MetricResult:
    """Pixel-domain visual information fidelity (ratio of distorted to reference information).

    Computed on the 0-255 scale so the classic noise variance of 2 applies unchanged.
    """
    check_same_shape(ref, dist)
    a, b = _planes(ref, dist, True)
    x, y = a[0] * 255.0, b[0] * 255.0
    num = 0.0
    den = 0.0
    for scale in range(1, scales + 1):
        n = 2 ** (scales - scale + 1) + 1
        g = gaussian_kernel1d(n, n / 5.0)
        if scale > 1:
            x = filter_valid(x, g)[::2, ::2]
            y = filter_valid(y, g)[::2, ::2]
        mu1 = filter_valid(x, g)
        mu2 = filter_valid(y, g)
        s1 = np.maximum(filter_valid(x * x, g) - mu1 * mu1, 0.0)
        s2 = np.maximum(filter_valid(y * y, g) - mu2 * mu2, 0.0)
        s12 = filter_valid(x * y, g) - mu1 * mu2

        gain = s12 / (s1 + VIF_EPS)
        sv = s2 - gain * s12
        flat_ref = s1 < VIF_EPS
        gain[flat_ref] = 0.0
        sv[flat_ref] = s2[flat_ref]
        s1 = np.where(flat_ref, 0.0, s1)
        flat_dist = s2 < VIF_EPS
        gain[flat_dist] = 0.0
        sv[flat_dist] = 0.0
        neg = gain < 0
        sv[neg] = s2[neg]
        gain[neg] = 0.0
        sv = np.maximum(sv, VIF_EPS)

        num += float(np.sum(np.log10(1.0 + gain * gain * s1 / (sv + VIF_SIGMA_NSQ))))
        den += float(np.sum(np.log10(1.0 + s1 / VIF_SIGMA_NSQ)))
    value = num / den if den > 0 else 1.0
    digest = f"scales={scales};windows=2^(5-s)+1,sigma=N/5;sigma_n^2=2 (0-255);eps=1e-10;luma=BT.601"
    return MetricResult("vifp", value, digest)
