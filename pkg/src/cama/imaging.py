"""Image representation, CFA mosaicking, dihedral augmentation and metrics.

All pixel data is float64 in [0, 1], laid out H x W x 3. Conversion to 8-bit
happens only at file boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage

from . import kernels
from .errors import ImageFormatError, ShapeError

# (row parity, col parity) -> channel index for the Bayer RGGB layout
RGGB = ((0, 1), (1, 2))

DIH4_NAMES = (
    "identity",
    "rot90",
    "rot180",
    "rot270",
    "flip-h",
    "flip-h*rot90",
    "flip-h*rot180",
    "flip-h*rot270",
)


@dataclass
class Image:
    pixels: np.ndarray
    label: Optional[int] = None
    source_path: Optional[str] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ShapeError(f"image must be at least 8x8, got {px.shape[:2]}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ShapeError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class Patch:
    pixels: np.ndarray
    label: Optional[int] = None
    augment_id: int = 0


def as_array(img) -> np.ndarray:
    if isinstance(img, (Image, Patch)):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def cfa_masks(h: int, w: int, pattern=RGGB) -> np.ndarray:
    """Binary 3 x H x W masks, one per colour channel."""
    masks = np.zeros((3, h, w))
    for a in range(2):
        for b in range(2):
            masks[pattern[a][b], a::2, b::2] = 1.0
    return masks


def mosaic(img, pattern=RGGB) -> np.ndarray:
    x = as_array(img)
    h, w = x.shape[:2]
    plane = np.empty((h, w))
    for a in range(2):
        for b in range(2):
            plane[a::2, b::2] = x[a::2, b::2, pattern[a][b]]
    return plane


def demosaic_bilinear(plane, pattern=RGGB) -> np.ndarray:
    """Bilinear demosaic of an RGGB plane.

    Known sites pass through; missing sites are the weighted average of the
    nearest same-colour neighbours in the 3x3 window, with replicate padding.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ShapeError("demosaic expects a single-plane raster")
    h, w = plane.shape
    if h % 2 or w % 2:
        raise ShapeError(f"demosaic requires even dimensions, got {h}x{w}")
    masks = cfa_masks(h, w, pattern)
    out = np.stack([kernels.bilinear_fill(plane, masks[c]) for c in range(3)], axis=-1)
    return np.clip(out, 0.0, 1.0)


def center_crop_even(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    top, left = (h % 2) // 2, (w % 2) // 2
    return x[top : top + h - h % 2, left : left + w - w % 2]


def remosaic(img) -> np.ndarray:
    """Project to the RGGB mosaic and demosaic back (odd sizes are center-cropped)."""
    x = center_crop_even(as_array(img))
    return demosaic_bilinear(mosaic(x))


def dih4(x: np.ndarray, k: int) -> np.ndarray:
    """Apply element ``k`` of the dihedral group to the two leading axes.

    Rotations are counter-clockwise; ``k >= 4`` applies a left-right flip
    after the rotation ``k - 4``.
    """
    if not 0 <= k <= 7:
        raise ValueError(f"dihedral index must be in 0..7, got {k}")
    out = np.rot90(x, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def dih4_apply(p: Patch, k: int) -> Patch:
    if p.pixels.shape[0] != p.pixels.shape[1]:
        raise ShapeError("dihedral augmentation requires a square patch")
    return Patch(dih4(p.pixels, k), p.label, k)


def extract_patches(img, size: int = 64) -> list[Patch]:
    """Non-overlapping ``size`` x ``size`` tiles of the top-left region, row-major."""
    x = as_array(img)
    label = img.label if isinstance(img, Image) else None
    rows, cols = x.shape[0] // size, x.shape[1] // size
    return [
        Patch(x[r * size : (r + 1) * size, c * size : (c + 1) * size].copy(), label, 0)
        for r in range(rows)
        for c in range(cols)
    ]


def psnr(a, b) -> float:
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def amplified_delta(x, x_prime, gain: float = 20.0) -> np.ndarray:
    x, x_prime = as_array(x), as_array(x_prime)
    if x.shape != x_prime.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_prime.shape}")
    if gain <= 0:
        raise ValueError("gain must be positive")
    return np.clip(0.5 + gain * (x_prime - x), 0.0, 1.0)


def to_uint8(x) -> np.ndarray:
    """Round half up to 8-bit, clipping to [0, 255]."""
    return np.clip(np.floor(as_array(x) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) / 255.0


def quantize(x) -> np.ndarray:
    """The value an image takes after an 8-bit write and re-read."""
    return from_uint8(to_uint8(x))


def read_image(path, label: Optional[int] = None) -> Image:
    with PILImage.open(path) as im:
        if im.mode == "RGBA":
            im = im.convert("RGB")
        elif im.mode == "P" and "transparency" not in im.info:
            im = im.convert("RGB")
        if im.mode != "RGB":
            raise ImageFormatError(f"{path}: expected 8-bit RGB, got mode {im.mode!r}")
        arr = np.asarray(im)
    return Image(from_uint8(arr), label, str(path))


def write_png(path, img) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
