# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled box kernels; semantics identical to ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, cosh, cos, sin, fabs, INFINITY

cnp.import_array()


cdef inline double _sech2(double x) nogil:
    cdef double c
    if x > 300.0:
        x = 300.0
    elif x < -300.0:
        x = -300.0
    c = cosh(x)
    return 1.0 / (c * c)


cdef inline double _clip01(double v) nogil:
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


def soft_membership(points, box, double alpha):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[::1] b = np.ascontiguousarray(box, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], i, ax
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] w = out
    cdef double a = 0.5 * alpha
    cdef double c = cos(b[6]), s = sin(b[6])
    cdef double qx, qy, prod, d[3]
    cdef double T[3]
    for ax in range(3):
        T[ax] = 2.0 * tanh(a * b[3 + ax])
    with nogil:
        for i in range(n):
            qx = p[i, 0] - b[0]
            qy = p[i, 1] - b[1]
            d[0] = c * qx + s * qy
            d[1] = -s * qx + c * qy
            d[2] = p[i, 2] - b[2]
            prod = 1.0
            for ax in range(3):
                prod *= (tanh(a * (d[ax] + b[3 + ax])) - tanh(a * (d[ax] - b[3 + ax]))) / T[ax]
            w[i] = _clip01(prod)
    return out


def soft_membership_grad(points, box, double alpha):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[::1] b = np.ascontiguousarray(box, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], i, ax
    out_w = np.empty(n, dtype=np.float64)
    out_g = np.empty((n, 7), dtype=np.float64)
    cdef double[::1] w = out_w
    cdef double[:, ::1] g = out_g
    cdef double a = 0.5 * alpha
    cdef double c = cos(b[6]), s = sin(b[6])
    cdef double qx, qy, up, lo, A, B, sa, sb
    cdef double d[3]
    cdef double f[3]
    cdef double fd[3]
    cdef double fh[3]
    cdef double T[3]
    cdef double ST[3]
    cdef double o0, o1, o2, g0, g1, g2
    for ax in range(3):
        T[ax] = tanh(a * b[3 + ax])
        ST[ax] = _sech2(a * b[3 + ax])
    with nogil:
        for i in range(n):
            qx = p[i, 0] - b[0]
            qy = p[i, 1] - b[1]
            d[0] = c * qx + s * qy
            d[1] = -s * qx + c * qy
            d[2] = p[i, 2] - b[2]
            for ax in range(3):
                up = a * (d[ax] + b[3 + ax])
                lo = a * (d[ax] - b[3 + ax])
                A = tanh(up)
                B = tanh(lo)
                sa = _sech2(up)
                sb = _sech2(lo)
                f[ax] = (A - B) / (2.0 * T[ax])
                fd[ax] = a * (sa - sb) / (2.0 * T[ax])
                fh[ax] = a * (sa + sb) / (2.0 * T[ax]) - (A - B) * a * ST[ax] / (2.0 * T[ax] * T[ax])
            o0 = f[1] * f[2]
            o1 = f[0] * f[2]
            o2 = f[0] * f[1]
            w[i] = _clip01(f[0] * o0)
            g0 = fd[0] * o0
            g1 = fd[1] * o1
            g2 = fd[2] * o2
            g[i, 0] = -(c * g0 - s * g1)
            g[i, 1] = -(s * g0 + c * g1)
            g[i, 2] = -g2
            g[i, 3] = fh[0] * o0
            g[i, 4] = fh[1] * o1
            g[i, 5] = fh[2] * o2
            g[i, 6] = g0 * d[1] - g1 * d[0]
    return out_w, out_g


def points_in_boxes(points, boxes, double margin=0.0):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, ::1] bx = np.ascontiguousarray(np.atleast_2d(boxes), dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], k = bx.shape[0], i, j
    out = np.zeros((k, n), dtype=np.uint8)
    cdef unsigned char[:, ::1] m = out
    cdef double c, s, qx, qy, hx, hy, hz
    with nogil:
        for j in range(k):
            c = cos(bx[j, 6])
            s = sin(bx[j, 6])
            hx = bx[j, 3] + margin
            hy = bx[j, 4] + margin
            hz = bx[j, 5] + margin
            for i in range(n):
                if fabs(p[i, 2] - bx[j, 2]) > hz:
                    continue
                qx = p[i, 0] - bx[j, 0]
                qy = p[i, 1] - bx[j, 1]
                if fabs(c * qx + s * qy) <= hx and fabs(-s * qx + c * qy) <= hy:
                    m[j, i] = 1
    return out


def nearest_center_assignment(points, boxes, mask):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, ::1] bx = np.ascontiguousarray(np.atleast_2d(boxes), dtype=np.float64)
    cdef unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t n = p.shape[0], k = bx.shape[0], i, j
    out = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] best = out
    cdef double bd, dx, dy, dz, d2
    with nogil:
        for i in range(n):
            bd = INFINITY
            for j in range(k):
                if m[j, i]:
                    dx = p[i, 0] - bx[j, 0]
                    dy = p[i, 1] - bx[j, 1]
                    dz = p[i, 2] - bx[j, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 < bd:
                        bd = d2
                        best[i] = j
    return out
