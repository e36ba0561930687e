"""Image buffers, PNG/PNM I/O, luminance conversion and the patch grid."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
BT601 = (0.299, 0.587, 0.114)


class ImageError(Exception):
    """Base class for image loading problems."""


class ImageNotFoundError(ImageError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class TruncatedImageError(ImageError):
    pass


class PatchGridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Planar image, ``data`` has shape (channels, height, width) with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] not in (1, 3):
            raise ValueError(f"expected (1|3, H, W) data, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if data.size and (not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: ImageBuffer
    position: tuple[float, float]
    grid_index: tuple[int, int]


@dataclass(frozen=True, eq=False)
class PatchSet:
    patches: list[Patch] = field(default_factory=list)
    source_dims: tuple[int, int] = (0, 0)

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def pixel_array(self) -> np.ndarray:
        """Stack patches channels-last: (N, P, P, C)."""
        return np.stack([np.moveaxis(p.pixels.data, 0, -1) for p in self.patches])

    def position_array(self) -> np.ndarray:
        return np.array([p.position for p in self.patches], dtype=np.float64)


# --------------------------------------------------------------------------- I/O


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise TruncatedImageError("header ends prematurely")
    return buf[start:pos], pos


def _decode_pnm(buf: bytes, dtype) -> np.ndarray:
    magic = buf[:2]
    channels = 3 if magic == b"P6" else 1
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise UnsupportedFormatError(f"malformed PNM header field {tok!r}") from None
    width, height, maxval = fields
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise UnsupportedFormatError("invalid PNM dimensions or maxval")
    pos += 1  # single whitespace byte after maxval
    sample = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    payload = buf[pos:pos + count * sample.itemsize]
    if len(payload) < count * sample.itemsize:
        raise TruncatedImageError(f"expected {count * sample.itemsize} bytes of pixel data, got {len(payload)}")
    px = np.frombuffer(payload, dtype=sample).reshape(height, width, channels)
    return np.moveaxis(px, -1, 0).astype(dtype) / dtype(maxval)


def _decode_png(path: str, dtype) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                return np.clip(arr, 0, 1).astype(dtype)[None]
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            if mode in ("1", "L", "LA"):
                arr = np.asarray(im.convert("L"))[None]
            else:
                arr = np.moveaxis(np.asarray(im.convert("RGB")), -1, 0)
    except (OSError, SyntaxError) as exc:
        raise TruncatedImageError(f"{path}: {exc}") from exc
    return arr.astype(dtype) / dtype(255)


def load_image(path, dtype=np.float64) -> ImageBuffer:
    """Read a PNG or binary PPM/PGM file, scaling integer samples into [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ImageNotFoundError(f"no such image: {path}")
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head.startswith(PNG_SIGNATURE):
            data = None
        elif head[:2] in (b"P5", b"P6"):
            data = _decode_pnm(head + fh.read(), np.dtype(dtype).type)
        else:
            raise UnsupportedFormatError(f"{path}: not a PNG or binary PPM/PGM file")
    if data is None:
        data = _decode_png(path, np.dtype(dtype).type)
    return ImageBuffer(data)


def to_uint8(img: ImageBuffer) -> np.ndarray:
    """Quantize to 8 bit, channels-last (H, W, C)."""
    return np.moveaxis(np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8), 0, -1)


def save_image(img: ImageBuffer, path) -> None:
    """Write an 8-bit PNG."""
    px = to_uint8(img)
    mode = "L" if img.channels == 1 else "RGB"
    Image.fromarray(px[..., 0] if img.channels == 1 else px, mode=mode).save(os.fspath(path), format="PNG")


def to_luma(img: ImageBuffer) -> ImageBuffer:
    """BT.601 luminance; single-channel input is returned unchanged."""
    if img.channels == 1:
        return img
    if img.channels != 3:
        raise ValueError(f"unsupported channel count {img.channels}")
    d = img.data
    y = BT601[0] * d[0] + BT601[1] * d[1] + BT601[2] * d[2]
    return ImageBuffer(np.clip(y, 0.0, 1.0)[None])


# -------------------------------------------------------------------- patch grid


def check_patch_size(width: int, height: int, patch_size: int) -> None:
    if patch_size <= 0 or width % patch_size or height % patch_size:
        raise PatchGridError(f"patch size {patch_size} does not divide {width}x{height}")


def patch_positions(width: int, height: int, patch_size: int) -> np.ndarray:
    """Offsets of patch centres from the image centre, in pixels, row-major (N, 2)."""
    check_patch_size(width, height, patch_size)
    cx = (np.arange(width // patch_size) + 0.5) * patch_size - width / 2
    cy = (np.arange(height // patch_size) + 0.5) * patch_size - height / 2
    gx, gy = np.meshgrid(cx, cy)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def patch_array(data: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut planar (C, H, W) data into a row-major (N, P, P, C) stack."""
    c, h, w = data.shape
    check_patch_size(w, h, patch_size)
    p = patch_size
    blocks = data.reshape(c, h // p, p, w // p, p).transpose(1, 3, 2, 4, 0)
    return np.ascontiguousarray(blocks.reshape(-1, p, p, c))


def assemble_patch_array(patches: np.ndarray, width: int, height: int) -> np.ndarray:
    """Inverse of :func:`patch_array`; returns planar (C, H, W)."""
    n, p, _, c = patches.shape
    rows, cols = height // p, width // p
    if rows * cols != n:
        raise PatchGridError(f"{n} patches cannot tile {width}x{height}")
    return patches.reshape(rows, cols, p, p, c).transpose(4, 0, 2, 1, 3).reshape(c, height, width)


def extract_patch_grid(img: ImageBuffer, patch_size: int) -> PatchSet:
    positions = patch_positions(img.width, img.height, patch_size)
    stack = patch_array(img.data, patch_size)
    cols = img.width // patch_size
    patches = [
        Patch(ImageBuffer(np.moveaxis(stack[i], -1, 0)), (float(positions[i, 0]), float(positions[i, 1])),
              divmod(i, cols))
        for i in range(len(stack))
    ]
    return PatchSet(patches, (img.width, img.height))


def assemble_patch_grid(patches: PatchSet) -> ImageBuffer:
    w, h = patches.source_dims
    return ImageBuffer(assemble_patch_array(patches.pixel_array(), w, h))
