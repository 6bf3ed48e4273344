"""The computational forms of the BFGS inverse Hessian.

Three equivalent constructions — iterative rank-two updates, the compact
(outer-product) form, and the two-loop recursion that applies the matrix
without forming it — plus products with the corresponding DIRECT Hessian
approximation, needed when aggregating in the middle of the pair history.
"""
import numpy as np
import scipy.linalg as sla

from . import _kernels as kernels
from .errors import CurvatureViolation, InvalidInput

# Dense n x n matrices are for tests and experiments only; solvers go
# through two_loop_apply.
DENSE_LIMIT = 256


class InitialMatrix:
    """Initial inverse-Hessian approximation: gamma*I or an SPD diagonal."""

    def __init__(self, diag, kind="diagonal"):
        diag = np.asarray(diag, dtype=float)
        if diag.ndim != 1 or diag.size == 0:
            raise InvalidInput("diagonal must be a nonempty vector")
        if not np.all(np.isfinite(diag)) or np.any(diag <= 0.0):
            raise InvalidInput("initial matrix requires a positive diagonal")
        self.diag = diag
        self.kind = kind
        self.n = diag.shape[0]

    @classmethod
    def scaled_identity(cls, gamma, n):
        if not (np.isfinite(gamma) and gamma > 0.0):
            raise InvalidInput(f"gamma must be positive, got {gamma}")
        return cls(np.full(n, float(gamma)), kind="scaled_identity")

    @classmethod
    def diagonal(cls, d):
        return cls(d, kind="diagonal")

    def apply(self, V):
        """W @ V for a vector or column-stacked matrix."""
        V = np.asarray(V, dtype=float)
        return self.diag * V if V.ndim == 1 else self.diag[:, None] * V

    def apply_inv(self, V):
        V = np.asarray(V, dtype=float)
        return V / self.diag if V.ndim == 1 else V / self.diag[:, None]

    def as_dense(self):
        return np.diag(self.diag)

    def __repr__(self):
        if self.kind == "scaled_identity":
            return f"InitialMatrix({self.diag[0]:g} * I_{self.n})"
        return f"InitialMatrix(diagonal, n={self.n})"


def _pair_rows(pairs, n):
    """Stack pairs as row matrices; validates curvature."""
    m = len(pairs)
    S = np.empty((m, n))
    Y = np.empty((m, n))
    rho = np.empty(m)
    for i, p in enumerate(pairs):
        sy = p.s @ p.y
        if not sy > 0.0:
            raise CurvatureViolation(f"pair {i}: s'y = {sy:.3e} <= 0")
        S[i] = p.s
        Y[i] = p.y
        rho[i] = p.rho
    return S, Y, rho


def _dense_guard(n):
    if n > DENSE_LIMIT:
        raise InvalidInput(
            f"dense BFGS forms are guarded to n <= {DENSE_LIMIT}, got {n}")


def bfgs_iterative(W: InitialMatrix, pairs) -> np.ndarray:
    """Dense inverse Hessian by applying the rank-two updates oldest first."""
    _dense_guard(W.n)
    S, Y, _ = _pair_rows(pairs, W.n)
    return kernels.dense_bfgs(W.as_dense(), S, Y)


def bfgs_compact(W: InitialMatrix, pairs) -> np.ndarray:
    """Dense inverse Hessian from the compact (outer product) form.

    Wbar = W + [S  WY] [ R^{-T}(D + Y'WY)R^{-1}   -R^{-T} ] [ S'  ]
                       [ -R^{-1}                   0      ] [ Y'W ]
    with R upper triangular holding s_i'y_j for i <= j.
    """
    _dense_guard(W.n)
    if not pairs:
        return W.as_dense()
    Srows, Yrows, _ = _pair_rows(pairs, W.n)
    S, Y = Srows.T, Yrows.T
    R = np.triu(S.T @ Y)
    WY = W.apply(Y)
    mid = np.diag(np.diag(R)) + Y.T @ WY
    G = sla.solve_triangular(R, S.T, lower=False)   # R^{-1} S'
    return W.as_dense() + G.T @ mid @ G - G.T @ WY.T - WY @ G


def two_loop_apply(W: InitialMatrix, pairs, g) -> np.ndarray:
    """Wbar @ g without forming Wbar; O(mn)."""
    g = np.ascontiguousarray(g, dtype=float)
    if not pairs:
        return W.apply(g)
    S, Y, rho = _pair_rows(pairs, W.n)
    return kernels.two_loop(S, Y, rho, np.ascontiguousarray(W.diag), g)


def direct_apply(W: InitialMatrix, pairs, V) -> np.ndarray:
    """Products with the DIRECT Hessian approximation, i.e. inverse(Wbar) V.

    Uses the compact representation of the direct BFGS matrix built from
    the same pairs; no dense n x n inverse is formed.  O(j^2 n + j k n)
    for j pairs and k columns.
    """
    V = np.asarray(V, dtype=float)
    vec = V.ndim == 1
    V2 = V[:, None] if vec else V
    B0V = W.apply_inv(V2)
    if not pairs:
        return B0V[:, 0] if vec else B0V
    Srows, Yrows, _ = _pair_rows(pairs, W.n)
    S, Y = Srows.T, Yrows.T
    j = S.shape[1]
    B0S = W.apply_inv(S)
    SY = S.T @ Y
    low = np.tril(SY, -1)
    mid = np.block([[S.T @ B0S, low],
                    [low.T, -np.diag(np.diag(SY))]])
    rhs = np.vstack([B0S.T @ V2, Y.T @ V2])
    sol = sla.solve(mid, rhs, assume_a="sym")
    out = B0V - np.hstack([B0S, Y]) @ sol
    return out[:, 0] if vec else out


class InverseHessianModel:
    """A BFGS inverse Hessian held in factored form: initial diagonal plus
    an ordered list of curvature pairs (oldest first).

    This is the "matrix" handed to aggregation when the deleted pair sits
    in the middle of the history: the pairs stored before it define the
    context the construction must preserve.
    """

    def __init__(self, initial: InitialMatrix, pairs=()):
        if not isinstance(initial, InitialMatrix):
            raise InvalidInput("initial must be an InitialMatrix")
        self.initial = initial
        self.pairs = list(pairs)
        self.n = initial.n

    def apply(self, g):
        """Model @ g without forming the model."""
        return two_loop_apply(self.initial, self.pairs, g)

    def apply_inverse_to(self, V):
        """inverse(model) @ V through the direct compact form."""
        return direct_apply(self.initial, self.pairs, V)

    def as_dense(self):
        return bfgs_iterative(self.initial, self.pairs)

    def __repr__(self):
        return (f"InverseHessianModel({self.initial!r}, "
                f"pairs={len(self.pairs)})")
