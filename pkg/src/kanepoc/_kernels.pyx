# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: B-spline evaluation and spline-layer passes.

Mirrors ``_kernels_py`` operation for operation so results are bitwise equal.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _span(double x, const double[::1] knots, int p, Py_ssize_t n_basis) noexcept nogil:
    # upper_bound(knots, x) - 1, then clamp to [p, n_basis - 1]
    cdef Py_ssize_t lo = 0, hi = knots.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if knots[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    lo -= 1
    if lo < p:
        lo = p
    if lo > n_basis - 1:
        lo = n_basis - 1
    return lo


def find_spans(x, knots, int degree, Py_ssize_t n_basis):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] kv = np.ascontiguousarray(knots, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], r
    out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] ov = out
    with nogil:
        for r in range(n):
            ov[r] = _span(xv[r], kv, degree, n_basis)
    return out


def basis_local(x, knots, int degree, Py_ssize_t n_basis):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(knots, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], r, s
    cdef int p = degree, j, k, a
    span = np.empty(n, dtype=np.intp)
    vals = np.zeros((n, p + 1))
    ders = np.zeros((n, p + 1))
    cdef Py_ssize_t[::1] sv = span
    cdef double[:, ::1] vv = vals
    cdef double[:, ::1] dv = ders
    cdef double[::1] left = np.empty(p + 1)
    cdef double[::1] right = np.empty(p + 1)
    cdef double[::1] low = np.empty(p + 1)
    cdef double xr, saved, temp, d
    with nogil:
        for r in range(n):
            xr = xv[r]
            s = _span(xr, t, p, n_basis)
            sv[r] = s
            vv[r, 0] = 1.0
            for j in range(1, p + 1):
                if j == p:
                    for k in range(p):
                        low[k] = vv[r, k]
                left[j] = xr - t[s + 1 - j]
                right[j] = t[s + j] - xr
                saved = 0.0
                for k in range(j):
                    temp = vv[r, k] / (right[k + 1] + left[j - k])
                    vv[r, k] = saved + right[k + 1] * temp
                    saved = left[j - k] * temp
                vv[r, j] = saved
            if p > 0:
                for a in range(p + 1):
                    d = 0.0
                    if a >= 1:
                        d = d + low[a - 1] / (t[s + a] - t[s - p + a])
                    if a <= p - 1:
                        d = d - low[a] / (t[s + a + 1] - t[s - p + a + 1])
                    dv[r, a] = p * d
    return span, vals, ders


def layer_forward(span, vals, beta):
    cdef const Py_ssize_t[:, ::1] sp = np.ascontiguousarray(span, dtype=np.intp)
    cdef const double[:, :, ::1] v = np.ascontiguousarray(vals, dtype=np.float64)
    cdef const double[:, :, ::1] b = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], n_in = v.shape[1], q = v.shape[2]
    cdef Py_ssize_t n_out = b.shape[0], p = q - 1
    cdef Py_ssize_t r, i, j, a, base
    cdef double acc
    out = np.zeros((n, n_out))
    cdef double[:, ::1] s = out
    with nogil:
        for r in range(n):
            for i in range(n_out):
                acc = 0.0
                for j in range(n_in):
                    base = sp[r, j] - p
                    for a in range(q):
                        acc = acc + v[r, j, a] * b[i, j, base + a]
                s[r, i] = acc
    return out


def layer_backward(span, vals, ders, beta, ds):
    cdef const Py_ssize_t[:, ::1] sp = np.ascontiguousarray(span, dtype=np.intp)
    cdef const double[:, :, ::1] v = np.ascontiguousarray(vals, dtype=np.float64)
    cdef const double[:, :, ::1] dv = np.ascontiguousarray(ders, dtype=np.float64)
    cdef const double[:, :, ::1] b = np.ascontiguousarray(beta, dtype=np.float64)
    cdef const double[:, ::1] g = np.ascontiguousarray(ds, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], n_in = v.shape[1], q = v.shape[2]
    cdef Py_ssize_t n_out = b.shape[0], n_basis = b.shape[2], p = q - 1
    cdef Py_ssize_t r, i, j, a, base
    cdef double acc, t, gri
    dbeta_arr = np.zeros((n_out, n_in, n_basis))
    dz_arr = np.zeros((n, n_in))
    cdef double[:, :, ::1] db = dbeta_arr
    cdef double[:, ::1] dz = dz_arr
    with nogil:
        for r in range(n):
            for i in range(n_out):
                gri = g[r, i]
                for j in range(n_in):
                    base = sp[r, j] - p
                    for a in range(q):
                        db[i, j, base + a] = db[i, j, base + a] + gri * v[r, j, a]
            for j in range(n_in):
                base = sp[r, j] - p
                acc = 0.0
                for i in range(n_out):
                    t = 0.0
                    for a in range(q):
                        t = t + b[i, j, base + a] * dv[r, j, a]
                    acc = acc + g[r, i] * t
                dz[r, j] = acc
    return dbeta_arr, dz_arr
