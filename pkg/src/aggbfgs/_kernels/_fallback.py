"""Numpy implementations of the hot kernels.

Pairs are passed as row matrices (pair i is S[i], Y[i]) so both
implementations walk memory contiguously.
"""
import numpy as np


def two_loop(S, Y, rho, w_diag, g):
    """Apply the BFGS inverse Hessian to g without forming it. O(mn)."""
    m = S.shape[0]
    q = np.array(g, dtype=float, copy=True)
    alpha = np.empty(m)
    for i in range(m - 1, -1, -1):
        alpha[i] = rho[i] * (S[i] @ q)
        q -= alpha[i] * Y[i]
    q *= w_diag
    for i in range(m):
        beta = rho[i] * (Y[i] @ q)
        q += (alpha[i] - beta) * S[i]
    return q


def dense_bfgs(W, S, Y):
    """Apply the BFGS inverse-Hessian updates, oldest first, to dense W.

    W is modified in place and returned.
    """
    for j in range(S.shape[0]):
        s, y = S[j], Y[j]
        rho = 1.0 / (s @ y)
        wy = W @ y
        c1 = rho * rho * (y @ wy) + rho
        W += c1 * np.outer(s, s)
        W -= rho * np.outer(s, wy)
        W -= rho * np.outer(wy, s)
    return W


def downdate_append(theta, new_inner, rel_tol):
    """Append-by-downdate on a new-first Gram factor.

    Returns (0, augmented_factor) on completion, or (i, partial) with
    breakdown index i >= 1; partial's rows 0..i hold everything computed
    so far (row i carries the cross vector in its first i entries).
    """
    m = theta.shape[0]
    mu = np.sqrt(new_inner[0])
    aug = np.zeros((m + 1, m + 1))
    aug[0, 0] = mu
    x = new_inner[1:] / mu
    aug[1:, 0] = x
    for k in range(m):
        t = theta[k, k]
        d2 = t * t - x[k] * x[k]
        if d2 <= rel_tol * t * t:
            return k + 1, aug
        r = np.sqrt(d2)
        aug[k + 1, k + 1] = r
        if k + 1 < m:
            col = theta[k + 1:, k]
            aug[k + 2:, k + 1] = (t * col - x[k] * x[k + 1:]) / r
            x[k + 1:] = (t * x[k + 1:] - x[k] * col) / r
    return 0, aug
