"""Noise-residual extractors used by evaluators and target classifiers."""

from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import pywt

from . import kernels
from .errors import ShapeError
from .imaging import as_array

WW_WAVELET = "db8"
WW_LEVELS = 4
WW_WINDOWS = (3, 5, 7, 9)
WW_SIGMA0 = 3.0 / 255.0

HP_KERNEL = (
    np.array(
        [
            [-1, 2, -2, 2, -1],
            [2, -6, 8, -6, 2],
            [-2, 8, -12, 8, -2],
            [2, -6, 8, -6, 2],
            [-1, 2, -2, 2, -1],
        ],
        dtype=np.float64,
    )
    / 12.0
)

# third difference -x[j-1] + 3x[j] - 3x[j+1] + x[j+2], centred on the second tap
FD_TAPS = np.array([0.0, -1.0, 3.0, -3.0, 1.0])


class PreprocessorKind(str, enum.Enum):
    RGB = "RGB"
    RGB_FD = "RGB_FD"
    FD = "FD"
    WW = "WW"
    CC = "CC"
    HP = "HP"

    @property
    def channels(self) -> int:
        return 6 if self is PreprocessorKind.RGB_FD else 3

    @classmethod
    def parse(cls, tag) -> "PreprocessorKind":
        if isinstance(tag, cls):
            return tag
        key = str(tag).upper().replace("+", "_").replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown preprocessor {tag!r}") from None


@dataclass
class FrequencyPair:
    high: np.ndarray
    low: np.ndarray


def _per_channel(x, fn):
    return np.stack([fn(x[..., c]) for c in range(x.shape[-1])], axis=-1)


def _ww_denoise_plane(plane, noise_var, wavelet, levels, windows):
    h, w = plane.shape
    block = 2**levels
    ph, pw = -h % block, -w % block
    padded = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    with warnings.catch_warnings():
        # small inputs trigger pywt's boundary-effect warning; periodization is exact anyway
        warnings.simplefilter("ignore", UserWarning)
        coeffs = pywt.wavedec2(padded, wavelet, mode="periodization", level=levels)
        shrunk = [coeffs[0]] + [
            tuple(kernels.wiener_shrink(d, noise_var, windows) for d in detail) for detail in coeffs[1:]
        ]
        rec = pywt.waverec2(shrunk, wavelet, mode="periodization")
    return rec[:h, :w]


def ww_residual(
    img,
    sigma0: float = WW_SIGMA0,
    wavelet: str = WW_WAVELET,
    levels: int = WW_LEVELS,
    windows=WW_WINDOWS,
) -> np.ndarray:
    """Residual ``x - H(x)`` of the wavelet-domain Wiener denoiser."""
    x = as_array(img)
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    if x.shape[0] < 32 or x.shape[1] < 32:
        raise ShapeError(f"wavelet-Wiener residual needs at least 32x32, got {x.shape[:2]}")
    noise_var = sigma0 * sigma0
    return x - _per_channel(x, lambda p: _ww_denoise_plane(p, noise_var, wavelet, levels, windows))


def hp_residual(img) -> np.ndarray:
    x = as_array(img)
    return _per_channel(x, lambda p: kernels.correlate_replicate(p, HP_KERNEL))


def fd_residual(img) -> np.ndarray:
    """Mean of the horizontal and vertical third-order differences."""
    x = as_array(img)
    if x.shape[0] < 4 or x.shape[1] < 4:
        raise ShapeError("third-order differences need at least 4x4")
    row_k, col_k = FD_TAPS[None, :], FD_TAPS[:, None]
    return _per_channel(
        x,
        lambda p: 0.5 * (kernels.correlate_replicate(p, row_k) + kernels.correlate_replicate(p, col_k)),
    )


def apply_preprocessor(kind, img, sigma0: float = WW_SIGMA0) -> np.ndarray:
    kind = PreprocessorKind.parse(kind)
    x = as_array(img)
    if kind in (PreprocessorKind.RGB, PreprocessorKind.CC):
        # CC is a trainable layer inside the classifier, not a fixed filter
        return x.copy()
    if kind is PreprocessorKind.FD:
        return fd_residual(x)
    if kind is PreprocessorKind.HP:
        return hp_residual(x)
    if kind is PreprocessorKind.WW:
        return ww_residual(x, sigma0)
    return np.concatenate([x, fd_residual(x)], axis=-1)


def frequency_split(img, residual_fn) -> FrequencyPair:
    x = as_array(img)
    high = np.asarray(residual_fn(x), dtype=np.float64)
    if high.shape != x.shape:
        raise ShapeError(f"residual shape {high.shape} does not match image {x.shape}")
    return FrequencyPair(high=high, low=x - high)


def write_residual(path, residual: np.ndarray) -> None:
    """Dump as little-endian int32 H, W, C followed by row-major float32 values."""
    r = np.asarray(residual)
    if r.ndim == 2:
        r = r[..., None]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", *r.shape))
        fh.write(np.ascontiguousarray(r, dtype="<f4").tobytes())


def read_residual(path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w, c = struct.unpack("<3i", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w * c:
        raise ShapeError(f"residual file holds {data.size} values, header says {h}x{w}x{c}")
    return data.reshape(h, w, c)
