"""Pure NumPy/SciPy versions of the compiled kernels."""

import numpy as np
from scipy import ndimage

_BILINEAR = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0])


def bilinear_fill(values, mask):
    values = np.ascontiguousarray(values, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    known = mask != 0.0
    num = ndimage.correlate(np.where(known, values, 0.0), _BILINEAR, mode="nearest")
    den = ndimage.correlate(known.astype(np.float64), _BILINEAR, mode="nearest")
    with np.errstate(invalid="ignore", divide="ignore"):
        filled = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.where(known, values, filled)


def correlate_replicate(plane, kernel):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError("kernel dimensions must be odd")
    return ndimage.correlate(np.asarray(plane, dtype=np.float64), kernel, mode="nearest")


def wiener_shrink(band, noise_var, windows):
    band = np.asarray(band, dtype=np.float64)
    sq = band * band
    local = np.min(
        [ndimage.uniform_filter(sq, size=int(w), mode="nearest") for w in windows], axis=0
    )
    var = np.maximum(local - noise_var, 0.0)
    return band * var / (var + noise_var)
