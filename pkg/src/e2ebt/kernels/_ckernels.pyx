# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels. Signature-compatible with numpy_backend.

Single-threaded by design: the benchmark contract requires it, and the
fused single-pass loops are what the compiled backend buys over numpy's
multi-temporary evaluation.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double TINY_F32 = 1.1754943508222875e-38   # smallest normal float32
cdef double TINY_F64 = 2.2250738585072014e-308  # smallest normal float64


cdef inline double _tiny(int itemsize) noexcept:
    return TINY_F32 if itemsize == 4 else TINY_F64


def softmax2d(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1], i, j
    out_arr = np.empty((n, v), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef double m, s, e
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            e = exp(<double> x[i, j] - m)
            out[i, j] = <real> e
            s += e
        s = 1.0 / s
        for j in range(v):
            out[i, j] = <real> (out[i, j] * s)
    return out_arr


def softmax2d_grad(real[:, ::1] p, real[:, ::1] gout):
    cdef Py_ssize_t n = p.shape[0], v = p.shape[1], i, j
    gin_arr = np.empty((n, v), dtype=np.asarray(p).dtype)
    cdef real[:, ::1] gin = gin_arr
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(v):
            inner += <double> gout[i, j] * <double> p[i, j]
        for j in range(v):
            gin[i, j] = <real> (<double> p[i, j] * (<double> gout[i, j] - inner))
    return gin_arr


def log_softmax2d(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1], i, j
    out_arr = np.empty((n, v), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef double m, s, lse
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            s += exp(<double> x[i, j] - m)
        lse = m + log(s)
        for j in range(v):
            out[i, j] = <real> (<double> x[i, j] - lse)
    return out_arr


def log_softmax2d_grad(real[:, ::1] lp, real[:, ::1] gout):
    cdef Py_ssize_t n = lp.shape[0], v = lp.shape[1], i, j
    gin_arr = np.empty((n, v), dtype=np.asarray(lp).dtype)
    cdef real[:, ::1] gin = gin_arr
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(v):
            s += <double> gout[i, j]
        for j in range(v):
            gin[i, j] = <real> (<double> gout[i, j] - exp(<double> lp[i, j]) * s)
    return gin_arr


def layernorm2d(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dt = np.asarray(x).dtype
    y_arr = np.empty((n, d), dtype=dt)
    mean_arr = np.empty(n, dtype=dt)
    rstd_arr = np.empty(n, dtype=dt)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] mean = mean_arr, rstd = rstd_arr
    cdef double mu, var, c, r
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += <double> x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = <double> x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        mean[i] = <real> mu
        rstd[i] = <real> r
        for j in range(d):
            y[i, j] = <real> (((<double> x[i, j]) - mu) * r * <double> gain[j] + <double> bias[j])
    return y_arr, mean_arr, rstd_arr


def layernorm2d_grad(real[:, ::1] x, real[::1] gain, real[::1] mean,
                     real[::1] rstd, real[:, ::1] gout):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dt = np.asarray(x).dtype
    gx_arr = np.empty((n, d), dtype=dt)
    ggain_arr = np.zeros(d, dtype=dt)
    gbias_arr = np.zeros(d, dtype=dt)
    cdef real[:, ::1] gx = gx_arr
    cdef real[::1] ggain = ggain_arr, gbias = gbias_arr
    cdef double mu, r, xh, gy, m1, m2
    for i in range(n):
        mu = <double> mean[i]
        r = <double> rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (<double> x[i, j] - mu) * r
            gy = <double> gout[i, j] * <double> gain[j]
            m1 += gy
            m2 += gy * xh
            ggain[j] += <real> (<double> gout[i, j] * xh)
            gbias[j] += gout[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = (<double> x[i, j] - mu) * r
            gy = <double> gout[i, j] * <double> gain[j]
            gx[i, j] = <real> ((gy - m1 - xh * m2) * r)
    return gx_arr, ggain_arr, gbias_arr


def nll_rows(real[:, ::1] lp, targets):
    cdef Py_ssize_t n = lp.shape[0], v = lp.shape[1], i, j
    dt = np.asarray(lp).dtype
    out_arr = np.empty(n, dtype=dt)
    cdef real[::1] out = out_arr
    cdef long[::1] ids
    cdef real[:, ::1] tp
    cdef double s
    if targets.ndim == 1:
        ids = np.ascontiguousarray(targets, dtype=np.int64)
        for i in range(n):
            out[i] = -lp[i, ids[i]]
    else:
        tp = np.ascontiguousarray(targets, dtype=dt)
        for i in range(n):
            s = 0.0
            for j in range(v):
                s += <double> tp[i, j] * <double> lp[i, j]
            out[i] = <real> (-s)
    return out_arr


def kl_rows(real[:, ::1] logq, real[:, ::1] prior):
    cdef Py_ssize_t n = logq.shape[0], v = logq.shape[1], i, j
    dt = np.asarray(logq).dtype
    out_arr = np.empty(n, dtype=dt)
    cdef real[::1] out = out_arr
    cdef double s, q, pr, tiny = _tiny(dt.itemsize)
    for i in range(n):
        s = 0.0
        for j in range(v):
            q = exp(<double> logq[i, j])
            pr = <double> prior[i, j]
            if pr < tiny:
                pr = tiny
            s += q * (<double> logq[i, j] - log(pr))
        out[i] = <real> s
    return out_arr


def kl_rows_grad(real[:, ::1] logq, real[:, ::1] prior, real[::1] kl,
                 real[::1] gout):
    cdef Py_ssize_t n = logq.shape[0], v = logq.shape[1], i, j
    dt = np.asarray(logq).dtype
    g_arr = np.empty((n, v), dtype=dt)
    cdef real[:, ::1] g = g_arr
    cdef double q, pr, tiny = _tiny(dt.itemsize)
    for i in range(n):
        for j in range(v):
            q = exp(<double> logq[i, j])
            pr = <double> prior[i, j]
            if pr < tiny:
                pr = tiny
            g[i, j] = <real> (<double> gout[i] * q
                              * (<double> logq[i, j] - log(pr) - <double> kl[i]))
    return g_arr


def sample_rows(real[:, ::1] p, double[::1] u):
    """Single-pass inverse-CDF walk per row; no cumsum array is built."""
    cdef Py_ssize_t n = p.shape[0], v = p.shape[1], i, j
    idx_arr = np.empty(n, dtype=np.int64)
    cdef long[::1] idx = idx_arr
    cdef double acc, ui
    for i in range(n):
        acc = 0.0
        ui = u[i]
        idx[i] = v - 1
        for j in range(v):
            acc += <double> p[i, j]
            if acc > ui:
                idx[i] = j
                break
    return idx_arr
