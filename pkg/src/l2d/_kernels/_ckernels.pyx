# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels.  Semantics match ``_numpy``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, H, W, 9 * C), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, dy, dx, c, yy, xx, base
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for dy in range(3):
                        yy = i + dy - 1
                        if yy < 0 or yy >= H:
                            continue
                        for dx in range(3):
                            xx = j + dx - 1
                            if xx < 0 or xx >= W:
                                continue
                            base = (dy * 3 + dx) * C
                            for c in range(C):
                                out[b, i, j, base + c] = x[b, yy, xx, c]
    return out_arr


def col2im3x3(real[:, :, :, ::1] cols, Py_ssize_t C):
    cdef Py_ssize_t B = cols.shape[0], H = cols.shape[1], W = cols.shape[2]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, H, W, C), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, dy, dx, c, yy, xx, base
    # gather form: each output pixel sums the patch slots that read it,
    # visiting (dy, dx) in the same order as the numpy scatter
    with nogil:
        for b in range(B):
            for dy in range(3):
                for dx in range(3):
                    base = (dy * 3 + dx) * C
                    for i in range(H):
                        yy = i + dy - 1
                        if yy < 0 or yy >= H:
                            continue
                        for j in range(W):
                            xx = j + dx - 1
                            if xx < 0 or xx >= W:
                                continue
                            for c in range(C):
                                out[b, yy, xx, c] += cols[b, i, j, base + c]
    return out_arr


def relation_huber(real[:, :, ::1] t, real[:, :, ::1] s, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t G = s.shape[0], N = s.shape[1], D = s.shape[2]
    dtype = np.float32 if real is float else np.float64
    grad64 = np.zeros((G, N, D), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad64
    cdef Py_ssize_t g, i, j, k
    cdef double acc_t, acc_s, diff, rt, rs, r, ar, w, coef
    cdef double loss = 0.0
    cdef long n_pairs = 0
    with nogil:
        for g in range(G):
            for i in range(N):
                if not mask[g, i]:
                    continue
                for j in range(i + 1, N):
                    if not mask[g, j]:
                        continue
                    n_pairs += 2
                    acc_t = 0.0
                    acc_s = 0.0
                    for k in range(D):
                        diff = <double>t[g, i, k] - <double>t[g, j, k]
                        acc_t += diff * diff
                        diff = <double>s[g, i, k] - <double>s[g, j, k]
                        acc_s += diff * diff
                    rt = sqrt(acc_t)
                    rs = sqrt(acc_s)
                    r = rt - rs
                    ar = fabs(r)
                    if ar <= 1.0:
                        loss += r * r          # two ordered pairs x 0.5
                        w = -r
                    else:
                        loss += 2.0 * (ar - 0.5)
                        w = -1.0 if r > 0 else 1.0
                    if rs > 0:
                        coef = 2.0 * w / rs
                        for k in range(D):
                            diff = <double>s[g, i, k] - <double>s[g, j, k]
                            grad[g, i, k] += coef * diff
                            grad[g, j, k] -= coef * diff
    return float(loss), grad64.astype(dtype), int(n_pairs)
