# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the hot kernels (see ``fallback.py`` for the
reference numpy versions; both backends must agree to float64 precision)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, floor, log

cnp.import_array()

BACKEND = "native"


def similarity_maps(double[:, :, ::1] features, double[:, ::1] prototypes, double epsilon):
    cdef Py_ssize_t h = features.shape[0]
    cdef Py_ssize_t w = features.shape[1]
    cdef Py_ssize_t d = features.shape[2]
    cdef Py_ssize_t n = prototypes.shape[0]
    out_arr = np.empty((n, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, r, c, k
    cdef double dsq, diff
    for i in range(n):
        for r in range(h):
            for c in range(w):
                dsq = 0.0
                for k in range(d):
                    diff = features[r, c, k] - prototypes[i, k]
                    dsq += diff * diff
                out[i, r, c] = log((dsq + 1.0) / (dsq + epsilon))
    return out_arr


cdef inline double _cubic(double s) nogil:
    # Catmull-Rom kernel, a = -0.5.
    cdef double a = -0.5
    s = fabs(s)
    if s <= 1.0:
        return (a + 2.0) * s * s * s - (a + 3.0) * s * s + 1.0
    if s < 2.0:
        return a * (s * s * s - 5.0 * s * s + 8.0 * s - 4.0)
    return 0.0


cdef inline Py_ssize_t _clampi(Py_ssize_t v, Py_ssize_t lo, Py_ssize_t hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def bicubic_upscale(double[:, ::1] src, Py_ssize_t target_h, Py_ssize_t target_w):
    cdef Py_ssize_t sh = src.shape[0]
    cdef Py_ssize_t sw = src.shape[1]
    horiz_arr = np.zeros((sh, target_w), dtype=np.float64)
    out_arr = np.zeros((target_h, target_w), dtype=np.float64)
    cdef double[:, ::1] horiz = horiz_arr
    cdef double[:, ::1] out = out_arr
    cdef double scale_w = sw / <double>target_w
    cdef double scale_h = sh / <double>target_h
    cdef Py_ssize_t r, c, k, base, tap
    cdef double x, t, acc
    # Horizontal pass.
    for c in range(target_w):
        x = (c + 0.5) * scale_w - 0.5
        base = <Py_ssize_t>floor(x)
        t = x - base
        for r in range(sh):
            acc = 0.0
            for k in range(4):
                tap = _clampi(base + k - 1, 0, sw - 1)
                acc += src[r, tap] * _cubic(t - (k - 1))
            horiz[r, c] = acc
    # Vertical pass.
    for r in range(target_h):
        x = (r + 0.5) * scale_h - 0.5
        base = <Py_ssize_t>floor(x)
        t = x - base
        for c in range(target_w):
            acc = 0.0
            for k in range(4):
                tap = _clampi(base + k - 1, 0, sh - 1)
                acc += horiz[tap, c] * _cubic(t - (k - 1))
            if acc < 0.0:
                acc = 0.0
            out[r, c] = acc
    return out_arr


def box_blur3(double[:, ::1] img, Py_ssize_t kernel=3):
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    cdef Py_ssize_t rad = kernel // 2
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c, dy, dx, rr, cc
    cdef double acc
    cdef double denom = <double>(kernel * kernel)
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for dy in range(-rad, rad + 1):
                for dx in range(-rad, rad + 1):
                    rr = _clampi(r + dy, 0, h - 1)
                    cc = _clampi(c + dx, 0, w - 1)
                    acc += img[rr, cc]
            out[r, c] = acc / denom
    return out_arr
