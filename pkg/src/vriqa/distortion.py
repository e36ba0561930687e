"""Synthetic distortions, a synthetic MOS oracle and dataset construction."""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import gaussian_filter, zoom

from .image import ImageBuffer, load_image, save_image
from .metrics2d import ms_ssim

KINDS = ("jpegish", "blur", "noise")
BLOCK = 8
# quantiser step per unit strength, in orthonormal-DCT units of [0, 1] data
JPEGISH_STEP = 0.15

TEXTURE_AMP = 0.08
TEXTURE_SIGMA = 1.0

DEFAULT_LADDERS = {
    "jpegish": (1.0, 2.0, 4.0, 8.0),
    "blur": (1.0, 2.0, 3.0, 5.0),
    "noise": (0.05, 0.1, 0.2, 0.35),
}


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if not self.strength >= 0:
            raise ValueError("strength must be >= 0")

    @property
    def label(self) -> str:
        return f"{self.kind}_{self.strength:g}"


def default_specs(seed: int = 0) -> list[DistortionSpec]:
    return [DistortionSpec(k, s, seed) for k in KINDS for s in DEFAULT_LADDERS[k]]


def jpegish(data: np.ndarray, strength: float) -> np.ndarray:
    """Blockwise 8x8 DCT with a flat quantiser; partial edge blocks are edge-padded then cropped."""
    step = strength * JPEGISH_STEP
    if step < 1e-12:
        # below float resolution of unit-range coefficients; also avoids dividing by a subnormal step
        return data.astype(np.float64)
    c, h, w = data.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    x = np.pad(data.astype(np.float64), ((0, 0), (0, ph), (0, pw)), mode="edge") - 0.5
    hb, wb = x.shape[1] // BLOCK, x.shape[2] // BLOCK
    blocks = x.reshape(c, hb, BLOCK, wb, BLOCK)
    coef = dctn(blocks, type=2, axes=(2, 4), norm="ortho")
    coef = np.round(coef / step) * step
    rec = idctn(coef, type=2, axes=(2, 4), norm="ortho").reshape(c, hb * BLOCK, wb * BLOCK) + 0.5
    return rec[:, :h, :w]


def distort(img: ImageBuffer, spec: DistortionSpec) -> ImageBuffer:
    if spec.strength == 0:
        return ImageBuffer(img.data.copy())
    data = img.data.astype(np.float64)
    if spec.kind == "jpegish":
        out = jpegish(data, spec.strength)
    elif spec.kind == "blur":
        # rows reflect at the poles, columns wrap around the 360-degree seam
        out = gaussian_filter(data, sigma=(0, spec.strength, spec.strength), mode=("constant", "reflect", "wrap"))
    else:
        rng = np.random.default_rng(spec.seed)
        out = data + rng.normal(0.0, spec.strength, size=data.shape)
    return ImageBuffer(np.clip(out, 0.0, 1.0).astype(img.data.dtype))


def synth_mos(ref: ImageBuffer, dist: ImageBuffer) -> float:
    """100 x clamp(MS-SSIM(ref, dist), 0, 1)."""
    return 100.0 * min(1.0, max(0.0, ms_ssim(ref, dist).value))


def quantize8(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(np.rint(img.data * 255.0) / 255.0)


# --------------------------------------------------------------------- scenes


def _smooth_field(rng, h, w, cells):
    coarse = rng.uniform(0.0, 1.0, size=(cells, 2 * cells))
    field_ = zoom(coarse, (h / cells, w / (2 * cells)), order=3, mode="grid-wrap", grid_mode=True)
    return field_[:h, :w]


def synth_scene(seed: int, width: int = 512, height: int = 256) -> ImageBuffer:
    """Procedural stand-in for a panorama: smooth sky/ground gradients, hard-edged objects and texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    lat = (0.5 - (yy + 0.5) / height) * np.pi
    horizon = rng.uniform(-0.2, 0.2)
    sky = rng.uniform(0.3, 1.0, size=3)
    ground = rng.uniform(0.0, 0.6, size=3)
    t = 1.0 / (1.0 + np.exp(-(lat - horizon) * rng.uniform(4, 12)))
    img = t[None] * sky[:, None, None] + (1 - t[None]) * ground[:, None, None]
    img = img + 0.25 * (_smooth_field(rng, height, width, int(rng.integers(3, 7)))[None] - 0.5)

    for _ in range(int(rng.integers(6, 16))):
        color = rng.uniform(0, 1, size=3)
        cx, cy = rng.uniform(0, width), rng.uniform(0.15, 0.85) * height
        rx, ry = rng.uniform(8, width / 6), rng.uniform(6, height / 4)
        dx = np.minimum(np.abs(xx - cx), width - np.abs(xx - cx))
        if rng.uniform() < 0.5:
            mask = (dx / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        else:
            mask = (dx <= rx) & (np.abs(yy - cy) <= ry)
        alpha = rng.uniform(0.6, 1.0)
        img = np.where(mask[None], (1 - alpha) * img + alpha * color[:, None, None], img)

    # fine grain of fixed statistics, so distortion visibility does not hinge on the scene
    texture = gaussian_filter(rng.normal(0, 1, size=(height, width)), TEXTURE_SIGMA, mode="wrap")
    texture /= texture.std() + 1e-12
    img = img + TEXTURE_AMP * texture[None]
    return ImageBuffer(np.clip(img, 0.0, 1.0))


# -------------------------------------------------------------------- dataset


class DatasetBuildError(RuntimeError):
    def __init__(self, failures):
        self.failures = failures
        super().__init__("; ".join(f"{path}: {exc}" for path, exc in failures))


def noise_seed(spec_seed: int, scene_id: str) -> int:
    return int(np.random.SeedSequence([spec_seed, zlib.crc32(scene_id.encode("utf-8"))]).generate_state(1)[0])


def build_dataset(refs, specs, out_dir, manifest_name: str = "manifest.csv") -> str:
    """Distort every reference with every spec, score with :func:`synth_mos`, write PNGs and a CSV manifest."""
    from .training import write_manifest

    os.makedirs(out_dir, exist_ok=True)
    rows, failures = [], []
    for ref_path in sorted(os.fspath(r) for r in refs):
        scene_id = os.path.splitext(os.path.basename(ref_path))[0]
        try:
            ref = load_image(ref_path)
        except Exception as exc:  # noqa: BLE001 - aggregated and re-raised below
            failures.append((ref_path, exc))
            continue
        for spec in specs:
            dist_path = os.path.join(out_dir, f"{scene_id}__{spec.label}.png")
            try:
                dist = quantize8(distort(ref, replace(spec, seed=noise_seed(spec.seed, scene_id))))
                save_image(dist, dist_path)
                mos = synth_mos(ref, dist)
            except Exception as exc:  # noqa: BLE001
                failures.append((dist_path, exc))
                continue
            rows.append({"ref_path": ref_path, "dist_path": dist_path, "mos": mos, "scene_id": scene_id,
                         "codec": spec.kind, "strength": spec.strength})
    if failures:
        raise DatasetBuildError(failures)
    manifest = os.path.join(out_dir, manifest_name)
    write_manifest(manifest, rows)
    return manifest


def write_synthetic_refs(out_dir, count: int, width: int = 512, height: int = 256, seed: int = 0) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(count):
        path = os.path.join(out_dir, f"scene{i:03d}.png")
        save_image(synth_scene(seed * 100003 + i, width, height), path)
        paths.append(path)
    return paths
