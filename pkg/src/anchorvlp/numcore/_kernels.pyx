# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels for the autodiff core.

Every routine works on C-contiguous 2-D float64 arrays of shape (rows, n);
callers reshape higher-rank inputs before dispatch.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, erf, M_SQRT1_2, M_2_SQRTPI

cnp.import_array()


def softmax_rows(double[:, ::1] x, const unsigned char[:, ::1] mask=None):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double m, s, e
    cdef bint masked = mask is not None
    with nogil:
        for i in range(rows):
            m = -1.0e308
            for j in range(n):
                if (not masked or mask[i, j]) and x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(n):
                if masked and not mask[i, j]:
                    out[i, j] = 0.0
                else:
                    e = exp(x[i, j] - m)
                    out[i, j] = e
                    s += e
            for j in range(n):
                out[i, j] /= s
    return out_arr


def softmax_rows_backward(double[:, ::1] y, double[:, ::1] dy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double dot
    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(n):
                dot += y[i, j] * dy[i, j]
            for j in range(n):
                out[i, j] = y[i, j] * (dy[i, j] - dot)
    return out_arr


def layer_norm_rows(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    """Return (out, xhat, rstd)."""
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out_arr = np.empty((rows, n), dtype=np.float64)
    xhat_arr = np.empty((rows, n), dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    with nogil:
        for i in range(rows):
            mu = 0.0
            for j in range(n):
                mu += x[i, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mu
                var += d * d
            var /= n
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(n):
                d = (x[i, j] - mu) * r
                xhat[i, j] = d
                out[i, j] = d * gamma[j] + beta[j]
    return out_arr, xhat_arr, rstd_arr


def layer_norm_rows_backward(double[:, ::1] xhat, double[::1] rstd,
                             double[::1] gamma, double[:, ::1] dy):
    """Return (dx, dgamma, dbeta)."""
    cdef Py_ssize_t rows = xhat.shape[0], n = xhat.shape[1], i, j
    dx_arr = np.empty((rows, n), dtype=np.float64)
    dg_arr = np.zeros(n, dtype=np.float64)
    db_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    cdef double s1, s2, g
    with nogil:
        for i in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                g = dy[i, j] * gamma[j]
                s1 += g
                s2 += g * xhat[i, j]
                dg[j] += dy[i, j] * xhat[i, j]
                db[j] += dy[i, j]
            s1 /= n
            s2 /= n
            for j in range(n):
                dx[i, j] = rstd[i] * (dy[i, j] * gamma[j] - s1 - xhat[i, j] * s2)
    return dx_arr, dg_arr, db_arr


def gelu_rows(double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(rows):
            for j in range(n):
                out[i, j] = 0.5 * x[i, j] * (1.0 + erf(x[i, j] * M_SQRT1_2))
    return out_arr


def gelu_rows_backward(double[:, ::1] x, double[:, ::1] dy):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double v, cdf, pdf
    # 1/sqrt(2*pi) = M_2_SQRTPI * M_SQRT1_2 / 2
    cdef double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2
    with nogil:
        for i in range(rows):
            for j in range(n):
                v = x[i, j]
                cdf = 0.5 * (1.0 + erf(v * M_SQRT1_2))
                pdf = inv_sqrt_2pi * exp(-0.5 * v * v)
                out[i, j] = dy[i, j] * (cdf + v * pdf)
    return out_arr


def scatter_add_rows(double[:, ::1] table_grad, const long[::1] ids, double[:, ::1] rows_grad):
    """In-place: table_grad[ids[k]] += rows_grad[k]."""
    cdef Py_ssize_t k, j, n = rows_grad.shape[1]
    with nogil:
        for k in range(ids.shape[0]):
            for j in range(n):
                table_grad[ids[k], j] += rows_grad[k, j]
