"""Small dense linear-algebra kernel.

Cholesky factorization with an append-by-downdate step, triangular solves,
rank-revealing QR with null-space extraction, and PSD square-root factors.
Everything operates on modest m x m (or n x m, m <= n) arrays at desk
scale; no sparse formats.

The Householder helpers at the bottom are dtype-generic so the aggregation
construction can retry an ill-conditioned instance in extended precision
(np.longdouble) with the exact same code path.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from . import _kernels as kernels
from .errors import (
    InvalidInput,
    NotPositiveDefinite,
    NotPsd,
    SingularTriangular,
)

# A recomputed diagonal-squared at or below this fraction of its
# pre-downdate value counts as zero (the downdate "breaks down").
BREAKDOWN_RTOL = 1e-14

# Eigenvalues of a nominally-PSD matrix may round slightly negative;
# anything above -PSD_CLAMP_RTOL * max|G| is clamped to zero.
PSD_CLAMP_RTOL = 1e-10


@dataclass
class CholeskyFactor:
    """Lower-triangular factor with strictly positive diagonal."""

    lower: np.ndarray

    @property
    def order(self) -> int:
        return self.lower.shape[0]


@dataclass
class DowndateOutcome:
    """Result of appending a vector to a factored Gram matrix.

    status is "completed" (factor holds the augmented Cholesky factor) or
    "breakdown" (breakdown_index i >= 1, partial_factor holds the leading
    i x i block, cross_vector the first i entries of row i).
    """

    status: str
    factor: Optional[CholeskyFactor] = None
    breakdown_index: int = 0
    partial_factor: Optional[CholeskyFactor] = None
    cross_vector: Optional[np.ndarray] = None


def cholesky_factor(G) -> CholeskyFactor:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {G.shape}")
    try:
        lower = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    return CholeskyFactor(lower)


def chol_append(theta, new_inner, rel_tol: float = BREAKDOWN_RTOL) -> DowndateOutcome:
    """Append a vector (placed FIRST in the ordering) to a factored Gram.

    theta is the factor of the old Gram with columns ordered newest first;
    new_inner is the would-be first row of the augmented Gram, i.e.
    [<new,new>, <new,v_1>, ..., <new,v_m>] with v_1 the previously newest
    vector.  The augmented factor has the shape [[mu, 0], [delta, Delta]]
    where Delta comes out of a rank-one downdate of theta; a collapsed
    diagonal during that downdate reveals linear dependence and is
    reported, not raised.
    """
    if isinstance(theta, CholeskyFactor):
        theta = theta.lower
    theta = np.asarray(theta, dtype=float)
    new_inner = np.asarray(new_inner, dtype=float)
    m = theta.shape[0]
    if new_inner.shape != (m + 1,):
        raise InvalidInput(
            f"need {m + 1} inner products for a factor of order {m}, "
            f"got {new_inner.shape}")
    if new_inner[0] <= 0.0:
        raise InvalidInput("new vector has zero (or negative) squared norm")

    # The loop itself (a hyperbolic downdate: Delta Delta' =
    # theta theta' - delta delta', column by column) lives in the kernels.
    i, aug = kernels.downdate_append(np.ascontiguousarray(theta),
                                     np.ascontiguousarray(new_inner), rel_tol)
    if i > 0:
        partial = CholeskyFactor(aug[:i, :i].copy())
        xi = aug[i, :i].copy()
        return DowndateOutcome(status="breakdown", breakdown_index=i,
                               partial_factor=partial, cross_vector=xi)
    return DowndateOutcome(status="completed", factor=CholeskyFactor(aug))


def tri_solve(T, rhs, side: str) -> np.ndarray:
    """Solve a triangular system.

    side = "forward": T is lower triangular, solve T x = rhs.
    side = "backward": T is upper triangular, solve T x = rhs.
    side = "transpose": T is lower triangular, solve T' x = rhs.
    """
    T = np.asarray(T, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if side not in ("forward", "backward", "transpose"):
        raise InvalidInput(f"unknown side {side!r}")
    if np.any(np.diag(T) == 0.0):
        raise SingularTriangular("zero diagonal entry")
    if side == "forward":
        return sla.solve_triangular(T, rhs, lower=True)
    if side == "backward":
        return sla.solve_triangular(T, rhs, lower=False)
    return sla.solve_triangular(T, rhs, lower=True, trans="T")


def qr_null_basis(Mt) -> np.ndarray:
    """Orthonormal basis of null(Mt') for a matrix Mt with rows >= cols.

    Returned columns N satisfy Mt' N = 0 (to roundoff); the column count
    is rows minus the numerical rank at the LAPACK-style threshold
    max(rows, cols) * eps * (largest column norm).
    """
    Mt = np.asarray(Mt, dtype=float)
    n, k = Mt.shape
    if k == 0:
        return np.eye(n)
    Q, R = np.linalg.qr(Mt, mode="complete")
    diag = np.abs(np.diag(R[:min(n, k), :k]))
    colnorm = float(np.max(np.linalg.norm(Mt, axis=0)))
    tol = max(n, k) * np.finfo(float).eps * max(colnorm, 1e-300)
    rank = int(np.sum(diag > tol))
    return Q[:, rank:]


def psd_sqrt_factor(G) -> np.ndarray:
    """A factor Z with Z'Z = G for symmetric PSD G.

    Tiny negative eigenvalues (above -PSD_CLAMP_RTOL * max|G|) are clamped
    to zero; anything more negative raises NotPsd.
    """
    G = np.asarray(G, dtype=float)
    scale = float(np.max(np.abs(G))) if G.size else 0.0
    evals, evecs = np.linalg.eigh(G)
    if scale > 0 and evals[0] < -PSD_CLAMP_RTOL * scale:
        raise NotPsd(f"eigenvalue {evals[0]:.3e} below clamp threshold")
    evals = np.clip(evals, 0.0, None)
    return np.sqrt(evals)[:, None] * evecs.T


# --------------------------------------------------------------------------
# dtype-generic Householder family (used by the extended-precision retry)
# --------------------------------------------------------------------------

def householder_qr(A, want_q="economic"):
    """Householder QR for any float dtype.

    want_q: "economic" (Q is n x m), "complete" (Q is n x n), or None
    (R only).  R is returned with the shape matching want_q's convention.
    """
    A = np.array(A, copy=True)
    n, m = A.shape
    dt = A.dtype
    vs = []
    for k in range(min(n, m)):
        x = A[k:, k]
        normx = np.sqrt(np.sum(x * x))
        if normx == 0:
            vs.append(None)
            continue
        alpha = -normx if x[0] >= 0 else normx
        v = x.copy()
        v[0] -= alpha
        vn = np.sqrt(np.sum(v * v))
        if vn == 0:
            vs.append(None)
            continue
        v /= vn
        A[k:, k:] -= 2.0 * np.outer(v, v @ A[k:, k:])
        A[k, k] = alpha
        A[k + 1:, k] = 0.0
        vs.append(v)
    if want_q is None:
        return None, np.triu(A[:min(n, m), :])
    qcols = m if want_q == "economic" else n
    Q = np.zeros((n, qcols), dtype=dt)
    np.fill_diagonal(Q, 1.0)
    for k in range(min(n, m) - 1, -1, -1):
        v = vs[k]
        if v is None:
            continue
        Q[k:, :] -= 2.0 * np.outer(v, v @ Q[k:, :])
    if want_q == "complete":
        return Q, np.triu(A)
    return Q, np.triu(A[:min(n, m), :])


def householder_rank(A):
    """Numerical rank and column pivots via greedy pivoted Householder QR."""
    A = np.array(A, copy=True)
    n, m = A.shape
    piv = np.arange(m)
    if A.size == 0:
        return 0, piv
    colmax0 = np.max(np.sqrt(np.sum(A * A, axis=0)))
    tol = max(n, m) * np.finfo(A.dtype).eps * max(float(colmax0), 1e-300)
    diag = []
    for k in range(min(n, m)):
        norms = np.sqrt(np.sum(A[k:, k:] * A[k:, k:], axis=0))
        jmax = int(np.argmax(norms)) + k
        if norms[jmax - k] == 0:
            break
        if jmax != k:
            A[:, [k, jmax]] = A[:, [jmax, k]]
            piv[[k, jmax]] = piv[[jmax, k]]
        x = A[k:, k]
        normx = np.sqrt(np.sum(x * x))
        alpha = -normx if x[0] >= 0 else normx
        v = x.copy()
        v[0] -= alpha
        vn = np.sqrt(np.sum(v * v))
        if vn > 0:
            v /= vn
            A[k:, k:] -= 2.0 * np.outer(v, v @ A[k:, k:])
        A[k, k] = alpha
        diag.append(abs(float(alpha)))
    rank = sum(1 for d in diag if d > tol)
    return rank, piv


def householder_null_basis(A):
    """Orthonormal basis of null(A') via complete Householder QR.

    Same contract as qr_null_basis but dtype generic.
    """
    n, k = A.shape
    Q, R = householder_qr(A, want_q="complete")
    if k == 0:
        return Q
    diag = np.abs(np.diag(R[:min(n, k), :k]))
    colnorm = np.max(np.sqrt(np.sum(A * A, axis=0))) if A.size else 0.0
    tol = max(A.shape) * np.finfo(A.dtype).eps * max(float(colnorm), 1e-300)
    rank = int(np.sum(diag > tol))
    return Q[:, rank:]


def substitution_solve(R, B, lower=False, trans=False):
    """Triangular solve by substitution, any float dtype, 1-D or 2-D rhs."""
    R = np.asarray(R)
    B = np.asarray(B)
    onedim = (B.ndim == 1)
    if onedim:
        B = B.reshape(-1, 1)
    m = R.shape[0]
    X = np.zeros_like(B, dtype=np.result_type(R.dtype, B.dtype))
    Rw = R.T if trans else R
    lo = lower != trans  # transposing flips the triangle
    if lo:
        for i in range(m):
            X[i] = (B[i] - Rw[i, :i] @ X[:i]) / Rw[i, i]
    else:
        for i in range(m - 1, -1, -1):
            X[i] = (B[i] - Rw[i, i + 1:] @ X[i + 1:]) / Rw[i, i]
    return X[:, 0] if onedim else X
