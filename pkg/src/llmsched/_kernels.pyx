# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same semantics as ``_kernels_py``."""
import numpy as np

cimport cython


cdef inline Py_ssize_t _bracket(double[::1] xs, double x) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = xs.shape[0] - 1, mid
    if x <= xs[0]:
        return 0
    if x >= xs[hi]:
        return hi - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if xs[mid] <= x:
            lo = mid
        else:
            hi = mid
    return lo


def interp1(xs, ys, double x):
    cdef double[::1] gx = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] gy = np.ascontiguousarray(ys, dtype=np.float64)
    return _interp1(gx, gy, x)


cdef double _interp1(double[::1] xs, double[::1] ys, double x) noexcept nogil:
    if xs.shape[0] == 1:
        return ys[0]
    cdef Py_ssize_t i = _bracket(xs, x)
    cdef double w = (x - xs[i]) / (xs[i + 1] - xs[i])
    return ys[i] * (1.0 - w) + ys[i + 1] * w


def interp2(xs, ys, table, double x, double y):
    cdef double[::1] gx = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] gy = np.ascontiguousarray(ys, dtype=np.float64)
    cdef double[:, ::1] t = np.ascontiguousarray(table, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double wx, wy, a, b
    if gx.shape[0] == 1:
        return _interp1(gy, t[0], y)
    if gy.shape[0] == 1:
        return _interp1(gx, np.ascontiguousarray(t[:, 0]), x)
    i = _bracket(gx, x)
    j = _bracket(gy, y)
    wx = (x - gx[i]) / (gx[i + 1] - gx[i])
    wy = (y - gy[j]) / (gy[j + 1] - gy[j])
    a = t[i, j] * (1.0 - wy) + t[i, j + 1] * wy
    b = t[i + 1, j] * (1.0 - wy) + t[i + 1, j + 1] * wy
    return a * (1.0 - wx) + b * wx


def flow_shop(times, release, stage_free):
    cdef double[:, ::1] tm = np.ascontiguousarray(times, dtype=np.float64)
    cdef Py_ssize_t n_jobs = tm.shape[0], n_stages = tm.shape[1], j, k
    cdef double[::1] rel = np.ascontiguousarray(release, dtype=np.float64)
    free_arr = np.ascontiguousarray(stage_free, dtype=np.float64)
    cdef double[::1] free = free_arr
    starts = np.empty((n_jobs, n_stages))
    ends = np.empty((n_jobs, n_stages))
    cdef double[:, ::1] st = starts
    cdef double[:, ::1] en = ends
    cdef double ready, s, e
    with nogil:
        for j in range(n_jobs):
            ready = rel[j]
            for k in range(n_stages):
                s = ready if ready > free[k] else free[k]
                e = s + tm[j, k]
                st[j, k] = s
                en[j, k] = e
                free[k] = e
                ready = e
    for k in range(n_stages):
        stage_free[k] = free[k]
    return starts, ends


def cyclic_pipeline(times, Py_ssize_t n_rounds, double t0):
    cdef double[:, ::1] tm = np.ascontiguousarray(times, dtype=np.float64)
    cdef Py_ssize_t n_mb = tm.shape[0], n_stages = tm.shape[1], r, m, k
    free_arr = np.full(n_stages, t0)
    last_arr = np.full(n_mb, t0)
    cdef double[::1] free = free_arr
    cdef double[::1] last = last_arr
    starts = np.empty((n_rounds, n_mb, n_stages))
    ends = np.empty((n_rounds, n_mb, n_stages))
    cdef double[:, :, ::1] st = starts
    cdef double[:, :, ::1] en = ends
    cdef double ready, s, e
    with nogil:
        for r in range(n_rounds):
            for m in range(n_mb):
                ready = last[m]
                for k in range(n_stages):
                    s = ready if ready > free[k] else free[k]
                    e = s + tm[m, k]
                    st[r, m, k] = s
                    en[r, m, k] = e
                    free[k] = e
                    ready = e
                last[m] = ready
    return starts, ends
