# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: t-SNE bandwidth search and gradient, bilinear resize.

Mirrors ``hmae._kernels_py`` function for function.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, floor, INFINITY

cnp.import_array()


def binary_search_perplexity(double[:, ::1] dist2, double perplexity, double tol=1e-5, int max_iter=200):
    """Row-conditional affinities whose entropy matches ``log(perplexity)``."""
    cdef Py_ssize_t n = dist2.shape[0]
    cdef Py_ssize_t i, j
    cdef int it
    cdef double beta, beta_min, beta_max, sum_p, sum_dp, h, hdiff, d0, v
    cdef double log_u = log(perplexity)
    P_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] P = P_arr
    betas_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] betas = betas_arr
    for i in range(n):
        beta = 1.0
        beta_min = -INFINITY
        beta_max = INFINITY
        # shift by the nearest distance so exp() cannot underflow to an all-zero row
        d0 = INFINITY
        for j in range(n):
            if j != i and dist2[i, j] < d0:
                d0 = dist2[i, j]
        for it in range(max_iter):
            sum_p = 0.0
            sum_dp = 0.0
            for j in range(n):
                if j == i:
                    P[i, j] = 0.0
                    continue
                v = exp(-(dist2[i, j] - d0) * beta)
                P[i, j] = v
                sum_p += v
                sum_dp += (dist2[i, j] - d0) * v
            h = log(sum_p) + beta * sum_dp / sum_p
            hdiff = h - log_u
            if fabs(hdiff) <= tol:
                break
            if hdiff > 0:
                beta_min = beta
                if beta_max == INFINITY:
                    beta = beta * 2.0
                else:
                    beta = (beta + beta_max) / 2.0
            else:
                beta_max = beta
                if beta_min == -INFINITY:
                    beta = beta / 2.0
                else:
                    beta = (beta + beta_min) / 2.0
        for j in range(n):
            P[i, j] = P[i, j] / sum_p
        betas[i] = beta
    return P_arr, betas_arr


def tsne_gradient(double[:, ::1] P, double[:, ::1] Y, double exaggeration=1.0):
    """Gradient of KL(P||Q) for Student-t Q, plus the KL value (with unscaled P)."""
    cdef Py_ssize_t n = Y.shape[0]
    cdef Py_ssize_t d = Y.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double diff, dist, z = 0.0, q, p, mult, kl = 0.0
    num_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] num = num_arr
    grad_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    for i in range(n):
        for j in range(i + 1, n):
            dist = 0.0
            for k in range(d):
                diff = Y[i, k] - Y[j, k]
                dist += diff * diff
            q = 1.0 / (1.0 + dist)
            num[i, j] = q
            num[j, i] = q
            z += 2.0 * q
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            q = num[i, j] / z
            if q < 1e-12:
                q = 1e-12
            p = P[i, j]
            if p > 0:
                kl += p * log(p / q)
            mult = (exaggeration * p - q) * num[i, j]
            for k in range(d):
                grad[i, k] += 4.0 * mult * (Y[i, k] - Y[j, k])
    return grad_arr, kl


def resize_bilinear(double[:, :, ::1] src, Py_ssize_t out_h, Py_ssize_t out_w):
    """Bilinear resampling with half-pixel centres and edge clamping."""
    cdef Py_ssize_t in_h = src.shape[0], in_w = src.shape[1], C = src.shape[2]
    cdef Py_ssize_t y, x, c, y0, y1, x0, x1
    cdef double sy = <double>in_h / out_h, sx = <double>in_w / out_w
    cdef double fy, fx, wy, wx
    out_arr = np.empty((out_h, out_w, C), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for y in range(out_h):
        fy = (y + 0.5) * sy - 0.5
        if fy < 0:
            fy = 0
        if fy > in_h - 1:
            fy = in_h - 1
        y0 = <Py_ssize_t>floor(fy)
        y1 = y0 + 1 if y0 + 1 < in_h else in_h - 1
        wy = fy - y0
        for x in range(out_w):
            fx = (x + 0.5) * sx - 0.5
            if fx < 0:
                fx = 0
            if fx > in_w - 1:
                fx = in_w - 1
            x0 = <Py_ssize_t>floor(fx)
            x1 = x0 + 1 if x0 + 1 < in_w else in_w - 1
            wx = fx - x0
            for c in range(C):
                out[y, x, c] = ((1 - wy) * ((1 - wx) * src[y0, x0, c] + wx * src[y0, x1, c])
                                + wy * ((1 - wx) * src[y1, x0, c] + wx * src[y1, x1, c]))
    return out_arr
