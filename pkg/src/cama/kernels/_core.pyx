# cython: language_level=3
"""Compiled inner loops for the imaging kernels.

Semantics are identical to :mod:`cama.kernels._fallback`; the test suite
checks both backends against the same brute-force oracles.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _clamp(Py_ssize_t i, Py_ssize_t n) nogil:
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


def bilinear_fill(double[:, ::1] values, double[:, ::1] mask):
    cdef Py_ssize_t h = values.shape[0], w = values.shape[1]
    cdef Py_ssize_t i, j, di, dj, ii, jj
    cdef double num, den, wt, m
    cdef double[3] k1 = [1.0, 2.0, 1.0]
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(h):
            for j in range(w):
                if mask[i, j] != 0.0:
                    out[i, j] = values[i, j]
                    continue
                num = 0.0
                den = 0.0
                for di in range(-1, 2):
                    ii = _clamp(i + di, h)
                    for dj in range(-1, 2):
                        jj = _clamp(j + dj, w)
                        m = mask[ii, jj]
                        if m != 0.0:
                            wt = k1[di + 1] * k1[dj + 1]
                            num = num + wt * values[ii, jj]
                            den = den + wt
                out[i, j] = num / den if den > 0.0 else 0.0
    return out_arr


def correlate_replicate(double[:, ::1] plane, double[:, ::1] kernel):
    cdef Py_ssize_t h = plane.shape[0], w = plane.shape[1]
    cdef Py_ssize_t kh = kernel.shape[0], kw = kernel.shape[1]
    cdef Py_ssize_t ch = kh // 2, cw = kw // 2
    cdef Py_ssize_t i, j, a, b
    cdef double acc, kv
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel dimensions must be odd")
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        kv = kernel[a, b]
                        if kv != 0.0:
                            acc = acc + kv * plane[_clamp(i + a - ch, h), _clamp(j + b - cw, w)]
                out[i, j] = acc
    return out_arr


def wiener_shrink(double[:, ::1] band, double noise_var, windows):
    """Attenuate one detail band with the min-over-windows local variance."""
    cdef Py_ssize_t h = band.shape[0], w = band.shape[1]
    cdef Py_ssize_t r = max(windows) // 2
    cdef Py_ssize_t ph = h + 2 * r, pw = w + 2 * r
    cdef Py_ssize_t i, j, half, size, n_win, k
    cdef double s, best, v, d
    cdef cnp.ndarray[cnp.float64_t, ndim=2] sat_arr = np.zeros((ph + 1, pw + 1), dtype=np.float64)
    cdef double[:, ::1] sat = sat_arr
    cdef long[::1] halves = np.asarray([int(x) // 2 for x in windows], dtype=np.int_)
    n_win = halves.shape[0]
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        # summed-area table of the squared, replicate-padded band
        for i in range(ph):
            s = 0.0
            for j in range(pw):
                d = band[_clamp(i - r, h), _clamp(j - r, w)]
                s = s + d * d
                sat[i + 1, j + 1] = sat[i, j + 1] + s
        for i in range(h):
            for j in range(w):
                best = 1e300
                for k in range(n_win):
                    half = halves[k]
                    size = 2 * half + 1
                    v = (sat[i + r + half + 1, j + r + half + 1]
                         - sat[i + r - half, j + r + half + 1]
                         - sat[i + r + half + 1, j + r - half]
                         + sat[i + r - half, j + r - half]) / (size * size)
                    if v < best:
                        best = v
                v = best - noise_var
                if v < 0.0:
                    v = 0.0
                out[i, j] = band[i, j] * v / (v + noise_var)
    return out_arr
