# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled single-pass kernels for the attention hot path.

Each function mirrors the numpy fallback exactly; the wins come from fusing
the multi-pass broadcasting (softmax, mask construction) into one sweep and
from calling libm's erf directly for GELU.
"""

import numpy as np

from libc.math cimport erf, exp, fabs, INFINITY, sqrt, M_PI

BACKEND_NAME = "compiled"

cdef double _INV_SQRT2 = 1.0 / sqrt(2.0)
cdef double _INV_SQRT_2PI = 1.0 / sqrt(2.0 * M_PI)


def softmax_rows_fwd(double[:, :] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, :] y = out
    cdef Py_ssize_t i, j
    cdef double rowmax, denom, v
    for i in range(m):
        rowmax = -INFINITY
        for j in range(n):
            if x[i, j] > rowmax:
                rowmax = x[i, j]
        if rowmax == -INFINITY:
            # fully masked row: defined as all zeros
            for j in range(n):
                y[i, j] = 0.0
            continue
        denom = 0.0
        for j in range(n):
            if x[i, j] == -INFINITY:
                y[i, j] = 0.0  # skip libm's slow path for exp(-inf)
            else:
                v = exp(x[i, j] - rowmax)
                y[i, j] = v
                denom += v
        for j in range(n):
            y[i, j] /= denom
    return out


def masked_softmax_fwd(double[:, :] x, double[:, :] mask):
    """softmax(x + mask) per row for an additive {0, -inf} mask; masked
    entries are excluded outright and read exactly 0."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, :] y = out
    cdef Py_ssize_t i, j
    cdef double rowmax, denom, v
    for i in range(m):
        rowmax = -INFINITY
        for j in range(n):
            if mask[i, j] == mask[i, j] and mask[i, j] != -INFINITY:
                v = x[i, j] + mask[i, j]
                if v > rowmax:
                    rowmax = v
        if rowmax == -INFINITY:
            for j in range(n):
                y[i, j] = 0.0
            continue
        denom = 0.0
        for j in range(n):
            if mask[i, j] != -INFINITY:
                v = exp(x[i, j] + mask[i, j] - rowmax)
                y[i, j] = v
                denom += v
            else:
                y[i, j] = 0.0
        for j in range(n):
            y[i, j] /= denom
    return out


def softmax_rows_bwd(double[:, :] y, double[:, :] g):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, :] dx = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def gelu_fwd(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    flat = arr.reshape(-1)
    out = np.empty_like(flat)
    cdef double[:] xv = flat
    cdef double[:] yv = out
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        yv[i] = 0.5 * xv[i] * (1.0 + erf(xv[i] * _INV_SQRT2))
    return out.reshape(arr.shape)


def gelu_bwd(x, g):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    grad = np.ascontiguousarray(g, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    out = np.empty_like(flat)
    cdef double[:] xv = flat
    cdef double[:] gv = gflat
    cdef double[:] dv = out
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double d
    for i in range(n):
        d = 0.5 * (1.0 + erf(xv[i] * _INV_SQRT2)) \
            + xv[i] * exp(-0.5 * xv[i] * xv[i]) * _INV_SQRT_2PI
        dv[i] = gv[i] * d
    return out.reshape(arr.shape)


def rope_fwd(double[:, :] x, double[:, :] cos, double[:, :] sin):
    cdef Py_ssize_t t = x.shape[0], d = x.shape[1], half = d // 2
    out = np.empty((t, d), dtype=np.float64)
    cdef double[:, :] y = out
    cdef Py_ssize_t i, k
    cdef double a, b, c, s
    for i in range(t):
        for k in range(half):
            a = x[i, 2 * k]
            b = x[i, 2 * k + 1]
            c = cos[i, k]
            s = sin[i, k]
            y[i, 2 * k] = a * c - b * s
            y[i, 2 * k + 1] = a * s + b * c
    return out


def build_mask(seq_ids, positions, int window):
    cdef long[:] sid = np.ascontiguousarray(seq_ids, dtype=np.int64)
    cdef long[:] pos = np.ascontiguousarray(positions, dtype=np.int64)
    cdef Py_ssize_t t = sid.shape[0]
    out = np.empty((t, t), dtype=np.float64)
    cdef double[:, :] mk = out
    cdef Py_ssize_t i, j
    cdef bint ok
    for i in range(t):
        for j in range(t):
            ok = sid[i] == sid[j]
            if ok and window > 0:
                ok = labs(pos[i] - pos[j]) < window
            mk[i, j] = 0.0 if ok else -INFINITY
    return out


cdef extern from "stdlib.h":
    long labs(long)
