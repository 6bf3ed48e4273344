# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot loops. Semantics mirror _fallback.py exactly."""
import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def two_loop(double[:, ::1] S, double[:, ::1] Y, double[::1] rho,
             double[::1] w_diag, double[::1] g):
    cdef Py_ssize_t m = S.shape[0]
    cdef Py_ssize_t n = S.shape[1]
    cdef Py_ssize_t i, k
    cdef double acc, a_i, beta
    q_arr = np.empty(n, dtype=np.float64)
    alpha_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] q = q_arr
    cdef double[::1] alpha = alpha_arr
    for k in range(n):
        q[k] = g[k]
    for i in range(m - 1, -1, -1):
        acc = 0.0
        for k in range(n):
            acc += S[i, k] * q[k]
        a_i = rho[i] * acc
        alpha[i] = a_i
        for k in range(n):
            q[k] -= a_i * Y[i, k]
    for k in range(n):
        q[k] *= w_diag[k]
    for i in range(m):
        acc = 0.0
        for k in range(n):
            acc += Y[i, k] * q[k]
        beta = rho[i] * acc
        acc = alpha[i] - beta
        for k in range(n):
            q[k] += acc * S[i, k]
    return q_arr


def dense_bfgs(double[:, ::1] W, double[:, ::1] S, double[:, ::1] Y):
    cdef Py_ssize_t m = S.shape[0]
    cdef Py_ssize_t n = S.shape[1]
    cdef Py_ssize_t j, i, k
    cdef double rho, ywy, acc, c1, si, wyi
    wy_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] wy = wy_arr
    for j in range(m):
        acc = 0.0
        for k in range(n):
            acc += S[j, k] * Y[j, k]
        rho = 1.0 / acc
        ywy = 0.0
        for i in range(n):
            acc = 0.0
            for k in range(n):
                acc += W[i, k] * Y[j, k]
            wy[i] = acc
            ywy += Y[j, i] * acc
        c1 = rho * rho * ywy + rho
        for i in range(n):
            si = S[j, i]
            wyi = wy[i]
            for k in range(n):
                W[i, k] += c1 * si * S[j, k] - rho * (si * wy[k] + wyi * S[j, k])
    return np.asarray(W)


def downdate_append(double[:, ::1] theta, double[::1] new_inner, double rel_tol):
    cdef Py_ssize_t m = theta.shape[0]
    cdef Py_ssize_t k, r_
    cdef double mu, t, d2, r, xk, tk
    aug_arr = np.zeros((m + 1, m + 1), dtype=np.float64)
    x_arr = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] aug = aug_arr
    cdef double[::1] x = x_arr
    mu = sqrt(new_inner[0])
    aug[0, 0] = mu
    for k in range(m):
        x[k] = new_inner[k + 1] / mu
        aug[k + 1, 0] = x[k]
    for k in range(m):
        t = theta[k, k]
        d2 = t * t - x[k] * x[k]
        if d2 <= rel_tol * t * t:
            return k + 1, aug_arr
        r = sqrt(d2)
        aug[k + 1, k + 1] = r
        xk = x[k]
        for r_ in range(k + 1, m):
            tk = theta[r_, k]
            aug[r_ + 1, k + 1] = (t * tk - xk * x[r_]) / r
            x[r_] = (t * x[r_] - xk * tk) / r
    return 0, aug_arr
