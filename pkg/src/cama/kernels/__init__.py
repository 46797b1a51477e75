"""Hot imaging kernels with a compiled core and a pure-Python fallback.

The compiled extension (``cama.kernels._core``) is used when it was built;
otherwise the NumPy/SciPy fallback is selected. Set ``CAMA_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from . import _fallback

BACKENDS = {"python": _fallback}

try:
    from . import _core
except ImportError:  # extension not built
    _core = None
else:
    BACKENDS["compiled"] = _core

if _core is not None and os.environ.get("CAMA_PURE_PYTHON") != "1":
    BACKEND = "compiled"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]


def bilinear_fill(values, mask):
    """Fill sites where ``mask == 0`` with the normalized 3x3 bilinear average
    of known neighbours (replicate padding). Known sites pass through."""
    return _impl.bilinear_fill(
        np.ascontiguousarray(values, dtype=np.float64), np.ascontiguousarray(mask, dtype=np.float64)
    )


def correlate_replicate(plane, kernel):
    """2-D correlation with an odd-sized kernel anchored at its center."""
    return _impl.correlate_replicate(
        np.ascontiguousarray(plane, dtype=np.float64), np.ascontiguousarray(kernel, dtype=np.float64)
    )


def wiener_shrink(band, noise_var, windows=(3, 5, 7, 9)):
    """Wiener-attenuate a wavelet detail band, ``d * v / (v + noise_var)``."""
    return _impl.wiener_shrink(np.ascontiguousarray(band, dtype=np.float64), float(noise_var), tuple(windows))
