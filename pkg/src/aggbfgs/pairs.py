"""Curvature-pair buffer with incremental dependence detection.

The store keeps pairs oldest first.  Dependence of an incoming iterate
displacement on the stored ones is detected by appending it (new-first
ordering) to the Cholesky factor of the displacement Gram matrix: the
rank-one downdate either completes (independent) or breaks down at an
index that maps straight onto which stored pair became expressible.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import linalg
from .errors import (CurvatureViolation, DegenerateSpan, InvalidInput,
                     NotPositiveDefinite)
from .forms import InitialMatrix

# Every this many incremental edits, the maintained Gram/Q matrices are
# rebuilt from the stored vectors and checked against drift.
REFRESH_INTERVAL = 50

# A breakdown-supplied tau is trusted only if it actually reproduces the
# dependent displacement this well; otherwise the factorization is redone
# from scratch (the incremental factor may have drifted).
TAU_RESIDUAL_RTOL = 1e-8


@dataclass
class CurvaturePair:
    """One (s, y) displacement pair with positive curvature."""

    s: np.ndarray
    y: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        self.s = np.ascontiguousarray(self.s, dtype=float)
        self.y = np.ascontiguousarray(self.y, dtype=float)
        sy = float(self.s @ self.y)
        if not sy > 0.0:
            raise CurvatureViolation(f"s'y = {sy:.6e} is not positive")
        if not self.rho:
            self.rho = 1.0 / sy


@dataclass
class DependenceReport:
    """Outcome of observing a new pair against the store.

    case is "independent", "parallel_newest", or "in_span".  For in_span,
    j is the 0-based (oldest-first) index of the stored pair that became
    expressible, and tau holds the coefficients over the NEWEST-FIRST
    ordering [s_new, s_newest, ..., s_{j+1}]; parallel_newest carries the
    single coefficient with s_newest = tau * s_new.
    """

    case: str
    j: int = -1
    tau: Optional[np.ndarray] = None


class PairStore:
    """Ordered pair buffer plus the two maintained Gram factorizations.

    maintain_factors=False turns the store into a plain capacity-capped
    buffer (no Gram/Q factorizations, no dependence detection): that is
    the right shape for solvers that never analyze the span, and it
    tolerates linearly dependent displacements.  With factors on, the
    capacity is additionally capped at n, since more than n stored
    displacements cannot stay independent.
    """

    def __init__(self, capacity: int, w: InitialMatrix,
                 maintain_factors: bool = True):
        if capacity < 1:
            raise InvalidInput("capacity must be at least 1")
        self.maintain_factors = bool(maintain_factors)
        self.capacity = int(min(capacity, w.n)) if self.maintain_factors \
            else int(capacity)
        self.w = w
        self.pairs: List[CurvaturePair] = []
        self.gram_factor: Optional[linalg.CholeskyFactor] = None
        self.q_factor: Optional[linalg.CholeskyFactor] = None
        self._q: np.ndarray = np.zeros((0, 0))  # maintained Q = S'W^{-1}S
        self._edits = 0
        self._pending_factor: Optional[linalg.CholeskyFactor] = None

    def __len__(self):
        return len(self.pairs)

    @property
    def full(self) -> bool:
        return len(self.pairs) >= self.capacity

    def s_matrix(self) -> np.ndarray:
        """Stored displacements as columns, oldest first."""
        if not self.pairs:
            return np.zeros((self.w.n, 0))
        return np.column_stack([p.s for p in self.pairs])

    def y_matrix(self) -> np.ndarray:
        if not self.pairs:
            return np.zeros((self.w.n, 0))
        return np.column_stack([p.y for p in self.pairs])

    # ----------------------------------------------------------- internals

    def _gram_new_first(self) -> np.ndarray:
        S_nf = self.s_matrix()[:, ::-1]
        return S_nf.T @ S_nf

    def _rebuild(self):
        """Refactor both maintained factorizations from the raw vectors."""
        if not self.maintain_factors:
            return
        if not self.pairs:
            self.gram_factor = None
            self.q_factor = None
            self._q = np.zeros((0, 0))
            return
        self.gram_factor = linalg.cholesky_factor(self._gram_new_first())
        S = self.s_matrix()
        self._q = S.T @ self.w.apply_inv(S)
        self.q_factor = linalg.cholesky_factor(self._q)

    def _count_edit(self):
        if not self.maintain_factors:
            return
        self._edits += 1
        if self._edits % REFRESH_INTERVAL == 0 and self.pairs:
            # drift check: rebuild from scratch if the maintained Q has
            # wandered from the true products
            S = self.s_matrix()
            q_true = S.T @ self.w.apply_inv(S)
            scale = max(float(np.max(np.abs(q_true))), 1e-300)
            if np.max(np.abs(self._q - q_true)) > 1e-10 * scale:
                self._rebuild()

    def _update_q_append(self, new_pair):
        """Extend Q by the new pair's row/column (O(mn) products)."""
        winv_s = self.w.apply_inv(new_pair.s)
        col = self.s_matrix().T @ winv_s
        m = len(self.pairs)
        q = np.empty((m, m))
        q[:m - 1, :m - 1] = self._q
        q[:m - 1, m - 1] = col[:-1]
        q[m - 1, :m - 1] = col[:-1]
        q[m - 1, m - 1] = col[-1]
        self._q = q
        self.q_factor = linalg.cholesky_factor(self._q)

    # ---------------------------------------------------------- mutations

    def append(self, new_pair: CurvaturePair):
        """Case 1 commit.  Reuses the factor from the matching observe.

        Transactional: if the displacement is so close to the stored span
        that the Gram factorization fails, the store is restored to its
        previous state before NotPositiveDefinite propagates.
        """
        self.pairs.append(new_pair)
        try:
            if self._pending_factor is not None \
                    and self._pending_factor.order == len(self.pairs):
                self.gram_factor = self._pending_factor
                self._pending_factor = None
                self._update_q_append(new_pair)
            else:
                self._rebuild()
        except NotPositiveDefinite:
            self.pairs.pop()
            self._pending_factor = None
            self._rebuild()
            raise
        self._count_edit()

    def remove(self, j: int):
        """Drop pair j (0-based, oldest first) and refactor."""
        del self.pairs[j]
        self._pending_factor = None
        self._rebuild()
        self._count_edit()

    def evict_oldest(self):
        self.remove(0)

    def replace_newest(self, new_pair: CurvaturePair):
        """Case 2 commit: the newest stored update is skipped entirely."""
        self.pairs[-1] = new_pair
        self._pending_factor = None
        self._rebuild()
        self._count_edit()

    def replace_tail_gradients(self, start: int, y_tilde: np.ndarray):
        """Swap aggregated gradient columns into pairs[start:].

        Slots are rebound to fresh pairs rather than edited in place:
        pair objects were handed in by the caller and may still be
        aliased elsewhere, so the store must not mutate them.  All
        columns are validated before any slot changes.
        """
        tail = self.pairs[start:]
        assert y_tilde.shape[1] == len(tail)
        fresh = []
        for i, p in enumerate(tail):
            y_new = np.ascontiguousarray(y_tilde[:, i], dtype=float)
            sy = float(p.s @ y_new)
            if not sy > 0.0:
                raise CurvatureViolation(
                    f"aggregated pair {start + i}: s'y = {sy:.3e} <= 0")
            fresh.append(CurvaturePair(p.s, y_new))
        self.pairs[start:] = fresh
        # displacements unchanged: Gram factors stay valid


def observe_pair(store: PairStore, new_pair: CurvaturePair) -> DependenceReport:
    """Classify a new pair against the store's displacement span.

    Independent <=> the Gram append completes; parallel_newest <=> the
    downdate breaks down immediately; in_span <=> it breaks down at depth
    i > 1, pointing at stored pair j = m - i, with tau solved from the
    partial factor.  A breakdown whose tau fails to reproduce s_j is
    treated as factor drift: everything is refactored from scratch and
    the observation retried once.
    """
    if not store.maintain_factors:
        raise InvalidInput("dependence detection needs a factor-maintaining "
                           "store (maintain_factors=True)")
    sy = float(new_pair.s @ new_pair.y)
    if not sy > 0.0:
        raise CurvatureViolation(f"s'y = {sy:.6e} is not positive")
    store._pending_factor = None
    if not store.pairs:
        s_new = new_pair.s
        store._pending_factor = linalg.CholeskyFactor(
            np.array([[float(np.linalg.norm(s_new))]]))
        return DependenceReport(case="independent")

    for attempt in (0, 1):
        theta = store.gram_factor
        S_nf = store.s_matrix()[:, ::-1]
        inner = np.concatenate([[new_pair.s @ new_pair.s],
                                S_nf.T @ new_pair.s])
        out = linalg.chol_append(theta, inner)
        if out.status == "completed":
            store._pending_factor = out.factor
            return DependenceReport(case="independent")

        i = out.breakdown_index
        tau = linalg.tri_solve(out.partial_factor.lower, out.cross_vector,
                               side="transpose")
        m = len(store.pairs)
        j = m - i
        # validate: does tau actually reproduce the dependent displacement?
        basis = np.column_stack([new_pair.s, S_nf[:, :i - 1]])
        s_j = store.pairs[j].s
        resid = np.linalg.norm(s_j - basis @ tau)
        if resid <= TAU_RESIDUAL_RTOL * np.linalg.norm(s_j):
            case = "parallel_newest" if i == 1 else "in_span"
            return DependenceReport(case=case, j=j, tau=tau)
        if attempt == 0:
            store._rebuild()   # drift suspected; refactor and retry once
            continue
        # Persistent breakdown with a poor tau: report what we have.
        case = "parallel_newest" if i == 1 else "in_span"
        return DependenceReport(case=case, j=j, tau=tau)


@dataclass
class ProjectionResult:
    accept: bool
    s_hat: np.ndarray
    coeffs: Optional[np.ndarray] = None  # over [s_{j+1}, ..., s_m, new_s]
    cond: float = np.inf                 # basis conditioning sv_max/sv_min


def project_test(store: PairStore, j: int, new_s, tol: float) -> ProjectionResult:
    """Orthogonal projection of stored s_j onto span{s_{j+1},...,s_m, new_s}.

    Accept iff ||s_j - s_hat|| <= tol * ||s_hat||; a zero projection always
    rejects (the ratio is undefined there).  cond reports the singular
    value spread of the basis so callers can refuse to trust coeffs from
    a nearly rank-deficient span.
    """
    if not (0.0 < tol < 1.0):
        raise InvalidInput(f"tol must lie in (0,1), got {tol}")
    if j >= len(store.pairs) - 1 and new_s is None:
        raise DegenerateSpan("no vectors span the projection target")
    cols = [p.s for p in store.pairs[j + 1:]]
    if new_s is not None:
        cols.append(np.asarray(new_s, dtype=float))
    if not cols:
        raise DegenerateSpan("no vectors span the projection target")
    B = np.column_stack(cols)
    s_j = store.pairs[j].s
    coeffs, _, _, sv = np.linalg.lstsq(B, s_j, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0.0 else np.inf
    s_hat = B @ coeffs
    hat_norm = float(np.linalg.norm(s_hat))
    if hat_norm == 0.0:
        return ProjectionResult(accept=False, s_hat=s_hat, coeffs=coeffs,
                                cond=cond)
    accept = float(np.linalg.norm(s_j - s_hat)) <= tol * hat_norm
    return ProjectionResult(accept=accept, s_hat=s_hat, coeffs=coeffs,
                            cond=cond)
