# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled versions of the hot kernels (see _numpyops for the contract)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin

cnp.import_array()


def im2col3(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _im2col3_impl(x)


def _im2col3_impl(double[:, :, ::1] x):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    out_arr = np.zeros((h * w, c * 9), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t ci, i, j, ki, kj, ii, jj, row, base
    with nogil:
        for ci in range(c):
            base = ci * 9
            for i in range(h):
                for j in range(w):
                    row = i * w + j
                    for ki in range(3):
                        ii = i + ki - 1
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(3):
                            jj = j + kj - 1
                            if jj < 0 or jj >= w:
                                continue
                            out[row, base + ki * 3 + kj] = x[ci, ii, jj]
    return out_arr


cdef int _clip_edge(double* px, double* py, int n,
                    double x1, double y1, double x2, double y2,
                    double* qx, double* qy) nogil:
    cdef int i, j, m = 0
    cdef double ex = x2 - x1, ey = y2 - y1
    cdef double di, dj, t
    for i in range(n):
        j = i - 1 if i > 0 else n - 1
        di = ex * (py[i] - y1) - ey * (px[i] - x1)
        dj = ex * (py[j] - y1) - ey * (px[j] - x1)
        if (di >= 0) != (dj >= 0):
            t = dj / (dj - di)
            qx[m] = px[j] + t * (px[i] - px[j])
            qy[m] = py[j] + t * (py[i] - py[j])
            m += 1
        if di >= 0:
            qx[m] = px[i]
            qy[m] = py[i]
            m += 1
    return m


cdef double _pair_iou(const double* a, const double* b) nogil:
    cdef double ax[16]
    cdef double ay[16]
    cdef double bx[4]
    cdef double by[4]
    cdef double tx[16]
    cdef double ty[16]
    cdef double ca, sa, cb, sb, area_a, area_b, inter, acc
    cdef double mult_a[4]
    cdef double mult_b[4]
    cdef int i, j, n, k
    mult_a[0] = 1.0; mult_a[1] = -1.0; mult_a[2] = -1.0; mult_a[3] = 1.0
    mult_b[0] = 1.0; mult_b[1] = 1.0; mult_b[2] = -1.0; mult_b[3] = -1.0

    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0

    ca = cos(a[4]); sa = sin(a[4])
    cb = cos(b[4]); sb = sin(b[4])
    for i in range(4):
        ax[i] = a[0] + 0.5 * a[3] * mult_a[i] * ca - 0.5 * a[2] * mult_b[i] * sa
        ay[i] = a[1] + 0.5 * a[3] * mult_a[i] * sa + 0.5 * a[2] * mult_b[i] * ca
        bx[i] = b[0] + 0.5 * b[3] * mult_a[i] * cb - 0.5 * b[2] * mult_b[i] * sb
        by[i] = b[1] + 0.5 * b[3] * mult_a[i] * sb + 0.5 * b[2] * mult_b[i] * cb

    n = 4
    for k in range(4):
        j = k + 1 if k < 3 else 0
        n = _clip_edge(ax, ay, n, bx[k], by[k], bx[j], by[j], tx, ty)
        if n == 0:
            return 0.0
        for i in range(n):
            ax[i] = tx[i]
            ay[i] = ty[i]

    acc = 0.0
    for i in range(n):
        j = i + 1 if i < n - 1 else 0
        acc += ax[i] * ay[j] - ax[j] * ay[i]
    inter = 0.5 * acc
    if inter <= 0.0:
        return 0.0
    if n < 3:
        return 0.0
    return inter / (area_a + area_b - inter)


def rotated_iou_pairs(boxes_a, boxes_b):
    a = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    b = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    if a.shape != b.shape:
        raise ValueError(f"paired IoU needs equal shapes, got {a.shape} vs {b.shape}")
    return _iou_pairs_impl(a, b)


def _iou_pairs_impl(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], i
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = _pair_iou(&a[i, 0], &b[i, 0])
    return out_arr
