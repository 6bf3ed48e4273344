"""Quasi-Newton minimization drivers.

Three modes share one loop:

* full_bfgs  — full-memory BFGS: every accepted pair is kept forever.
* lbfgs      — standard limited memory: append, evict oldest at capacity.
* agg_bfgs   — limited memory with displacement aggregation: before a
  new pair is stored, the buffer is scanned (newest stored displacement
  first, oldest last) for a stored displacement that lies in the span of
  the newer ones plus the incoming step.  A hit folds that pair's
  curvature information into the newer gradient displacements instead of
  dropping it; only if nothing is foldable does the buffer fall back to
  ordinary eviction.

The scan acceptance test is relative: ||s_j - proj|| <= tol * ||proj||,
with a tight tolerance (tol_recent) for every position except the
oldest, which uses a loose one (tol_oldest) to promote folding the pair
that standard L-BFGS would throw away.  Aggregation then runs on the
projection itself (exactly dependent by construction) paired with the
stored gradient displacement.

Folding is exact in exact arithmetic but its output scales with the
span coefficients, not with the matrix it represents: a projection that
needs huge mutually-cancelling coefficients yields aggregated gradients
orders of magnitude larger than the originals, and the represented
matrix drowns in their roundoff.  Two guards keep the policy honest: a
cheap pre-check on the coefficient cancellation factor, and a post-fold
probe comparing two-loop products through the store before and after
the fold.  A candidate that fails either is skipped (an older candidate
may still fold); if nothing folds, the buffer falls back to eviction.

Search directions always come from the two-loop recursion over the
stored pairs, so the per-iteration cost matches L-BFGS; aggregation adds
O(m^2 n + m^4) only on the iterations where it fires.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import aggregation, linesearch
from .errors import (ConstructionFailure, CurvatureViolation, InvalidInput,
                     MaxBisections, NotDescent, NotPositiveDefinite)
from .forms import InitialMatrix, InverseHessianModel, two_loop_apply
from .linesearch import WolfeParams, exact_quadratic_step, weak_wolfe_search
from .pairs import CurvaturePair, PairStore, observe_pair, project_test

MODE_FULL_BFGS = "full_bfgs"
MODE_LBFGS = "lbfgs"
MODE_AGG_BFGS = "agg_bfgs"
_MODES = (MODE_FULL_BFGS, MODE_LBFGS, MODE_AGG_BFGS)

# accepted spellings for each mode, lowercased, "(m)" suffixes stripped
_MODE_ALIASES = {
    "full_bfgs": MODE_FULL_BFGS, "fullbfgs": MODE_FULL_BFGS,
    "full": MODE_FULL_BFGS, "bfgs": MODE_FULL_BFGS,
    "lbfgs": MODE_LBFGS, "l-bfgs": MODE_LBFGS,
    "agg_bfgs": MODE_AGG_BFGS, "aggbfgs": MODE_AGG_BFGS,
    "agg-bfgs": MODE_AGG_BFGS, "agg": MODE_AGG_BFGS,
}

STATUS_CONVERGED = "converged"
STATUS_ITER_LIMIT = "iter_limit"
STATUS_LINESEARCH_FAILURE = "linesearch_failure"

LINE_SEARCH_WOLFE = "wolfe"
LINE_SEARCH_EXACT = "exact"

ACTION_APPEND = "append"
ACTION_REPLACE_NEWEST = "replace_newest"
ACTION_AGGREGATE = "aggregate"
ACTION_EVICT_APPEND = "evict_append"

# A fold is only attempted when its span coefficients are balanced:
# ||coeffs|| * max||s_i|| / ||s_hat|| bounds how far the aggregated
# gradients overshoot the matrix they represent, and with it the
# roundoff amplification of every later product with the store.
KAPPA_LIMIT = 1e4
# A completed fold whose internal consistency residuals exceed this is
# discarded.
FOLD_RESIDUAL_LIMIT = 1e-7
# Relative two-loop disagreement (store folded vs. store with the
# dependent displacement replaced by its projection) above which a fold
# is rejected.  This certifies the matrix identity itself; the internal
# residuals cannot, because they are equations the construction
# satisfies even when cancellation has destroyed the result.
PROBE_RTOL = 1e-6


def normalize_mode(mode: str) -> str:
    """Map user spellings like "AggBFGS(5)" onto a canonical mode name."""
    key = str(mode).strip().lower()
    if "(" in key:
        key = key.split("(", 1)[0]
    try:
        return _MODE_ALIASES[key]
    except KeyError:
        raise InvalidInput(
            f"unknown mode {mode!r}; expected one of {_MODES}") from None


@dataclass
class SolverConfig:
    mode: str = MODE_AGG_BFGS
    memory: int = 5
    grad_tol: float = 1e-6
    max_iters: int = 100_000
    tol_recent: float = 1e-8
    tol_oldest: float = 1e-1
    wolfe: WolfeParams = field(default_factory=WolfeParams)
    initial_matrix: Optional[InitialMatrix] = None
    # gamma_k * I initialization, rescaled every iteration from the newest
    # pair.  Only meaningful for lbfgs: aggregation's full-memory
    # equivalence requires one fixed initial matrix across the whole run.
    scale_initial: bool = False
    line_search: str = LINE_SEARCH_WOLFE
    keep_trace: bool = False

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        self.memory = int(self.memory)
        if self.memory < 1:
            raise InvalidInput("memory must be at least 1")
        if not self.grad_tol > 0.0:
            raise InvalidInput("grad_tol must be positive")
        if int(self.max_iters) < 1:
            raise InvalidInput("max_iters must be at least 1")
        if not (0.0 < self.tol_recent <= self.tol_oldest < 1.0):
            raise InvalidInput(
                f"need 0 < tol_recent <= tol_oldest < 1, got "
                f"({self.tol_recent}, {self.tol_oldest})")
        if self.scale_initial and self.mode == MODE_AGG_BFGS:
            raise InvalidInput(
                "scaled initialization is incompatible with aggregation: "
                "the stored pairs all refer to one fixed initial matrix")
        if self.line_search not in (LINE_SEARCH_WOLFE, LINE_SEARCH_EXACT):
            raise InvalidInput(f"unknown line search {self.line_search!r}")


@dataclass
class SolverState:
    x: np.ndarray
    f: float
    g: np.ndarray
    d: Optional[np.ndarray]
    alpha: float
    k: int
    store: PairStore
    initial: InitialMatrix
    aggs: int = 0
    fallbacks: int = 0
    funcs: int = 0


@dataclass(frozen=True)
class MemoryEdit:
    """What update_memory did with the new pair."""

    action: str
    removed_index: int = -1      # 0-based store position that went away
    escalated: bool = False      # aggregation re-ran in extended precision


@dataclass(frozen=True)
class TraceRecord:
    k: int
    f: float
    grad_inf: float
    alpha: float
    func_evals: int
    store_size: int
    action: str
    direction: np.ndarray


@dataclass(frozen=True)
class SolverReport:
    x: np.ndarray
    f: float
    grad_inf: float
    iters: int
    funcs: int
    aggs: int
    fallbacks: int
    status: str
    trace: Optional[List[TraceRecord]] = None


# --------------------------------------------------------------------------
# memory policy
# --------------------------------------------------------------------------

def _admit(store: PairStore, new_pair: CurvaturePair) -> int:
    """Append, shedding oldest pairs while the Gram refuses to factor.

    Returns how many stored pairs had to be dropped; almost always 0.
    PairStore.append is transactional, so each failed attempt leaves the
    store consistent before the next eviction.
    """
    drops = 0
    while True:
        try:
            store.append(new_pair)
            return drops
        except NotPositiveDefinite:
            if not store.pairs:
                raise
            store.evict_oldest()
            drops += 1


def _cancellation_factor(store: PairStore, j: int, new_pair: CurvaturePair,
                         coeffs: np.ndarray, s_hat: np.ndarray) -> float:
    """How much the span coefficients cancel against the basis scale."""
    scales = [float(np.linalg.norm(p.s)) for p in store.pairs[j + 1:]]
    scales.append(float(np.linalg.norm(new_pair.s)))
    denom = float(np.linalg.norm(s_hat))
    if denom <= 0.0:
        return float("inf")
    return float(np.linalg.norm(coeffs)) * max(scales) / denom


def _fold_probe_error(initial: InitialMatrix, premise, folded,
                      new_pair: CurvaturePair) -> float:
    """Worst relative two-loop disagreement between two pair histories."""
    n = initial.n
    alternating = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    worst = 0.0
    for v in (new_pair.y, alternating):
        ref = two_loop_apply(initial, premise, v)
        got = two_loop_apply(initial, folded, v)
        denom = float(np.linalg.norm(ref))
        if denom > 0.0:
            worst = max(worst, float(np.linalg.norm(got - ref)) / denom)
    return worst


def _aggregate_at(state: SolverState, j: int, s_hat: np.ndarray,
                  coeffs: np.ndarray, new_pair: CurvaturePair) -> MemoryEdit:
    """Fold stored pair j into the newer pairs plus the incoming one.

    s_hat must satisfy s_hat = [s_{j+1} ... s_last new_s] @ coeffs
    bitwise; ConstructionFailure/CurvatureViolation propagate to the
    caller, which owns the fallback.  The store is only mutated after
    aggregation fully succeeds and the folded pairs reproduce the
    pre-fold two-loop products on probe vectors.
    """
    store = state.store
    retained = store.pairs[j + 1:] + [new_pair]
    removed = CurvaturePair(s_hat, store.pairs[j].y)
    if j == 0:
        context = store.w
    else:
        context = InverseHessianModel(store.w, store.pairs[:j])
    result = aggregation.aggregate(context, retained, removed,
                                   np.asarray(coeffs, dtype=float))
    residual = max(result.workspace.key_residuals, default=0.0)
    if residual > FOLD_RESIDUAL_LIMIT:
        raise ConstructionFailure(
            f"fold consistency residual {residual:.3e} exceeds "
            f"{FOLD_RESIDUAL_LIMIT:.0e}")
    y_tilde = result.y_tilde
    folded = []
    for i, p in enumerate(retained):
        if not float(p.s @ y_tilde[:, i]) > 0.0:
            raise ConstructionFailure(
                f"aggregated column {i} lost positive curvature")
        folded.append(CurvaturePair(p.s, y_tilde[:, i].copy()))
    prefix = store.pairs[:j]
    probe = _fold_probe_error(state.initial,
                              prefix + [removed] + retained,
                              prefix + folded, new_pair)
    if probe > PROBE_RTOL:
        raise ConstructionFailure(
            f"fold probe disagreement {probe:.3e} exceeds {PROBE_RTOL:.0e}")
    store.remove(j)
    _admit(store, new_pair)
    start = len(store.pairs) - len(retained)
    if start >= 0:
        store.replace_tail_gradients(start, y_tilde)
    else:
        # admission had to shed into the retained range; apply what's left
        store.replace_tail_gradients(0, y_tilde[:, -start:])
    state.aggs += 1
    return MemoryEdit(action=ACTION_AGGREGATE, removed_index=j,
                      escalated=bool(result.workspace.escalated))


def update_memory(state: SolverState, new_pair: CurvaturePair,
                  config: SolverConfig) -> MemoryEdit:
    """Admit one new curvature pair under the configured storage policy."""
    store = state.store
    if config.mode == MODE_FULL_BFGS:
        store.append(new_pair)
        return MemoryEdit(action=ACTION_APPEND)
    if config.mode == MODE_LBFGS:
        if store.full:
            store.evict_oldest()
            store.append(new_pair)
            return MemoryEdit(action=ACTION_EVICT_APPEND, removed_index=0)
        store.append(new_pair)
        return MemoryEdit(action=ACTION_APPEND)

    # agg_bfgs
    report = observe_pair(store, new_pair)
    if report.case == "parallel_newest":
        # the newest stored update would be skipped entirely anyway once
        # the new pair lands on top of it: replace, no aggregation needed
        j = len(store.pairs) - 1
        store.replace_newest(new_pair)
        return MemoryEdit(action=ACTION_REPLACE_NEWEST, removed_index=j)

    # Scan stored displacements, newest first, for one that lies in the
    # span of the newer ones plus the incoming step.  An exact in_span
    # report routes through here as well: the Gram downdate's breakdown
    # coefficients are detector-grade, while the projection recomputes
    # them at least-squares precision, which the fold's accuracy needs.
    # A candidate that fails a guard or the fold itself does not end the
    # scan — an older displacement may still fold cleanly.
    m_bar = len(store.pairs)
    fold_failed = False
    for j in range(m_bar - 1, -1, -1):
        tol = config.tol_oldest if j == 0 else config.tol_recent
        proj = project_test(store, j, new_pair.s, tol)
        if not proj.accept:
            continue
        if _cancellation_factor(store, j, new_pair, proj.coeffs,
                                proj.s_hat) > KAPPA_LIMIT:
            fold_failed = True
            continue
        if not float(proj.s_hat @ store.pairs[j].y) > 0.0:
            continue   # projection flipped the curvature; not foldable
        try:
            return _aggregate_at(state, j, proj.s_hat, proj.coeffs, new_pair)
        except (ConstructionFailure, CurvatureViolation):
            fold_failed = True
            continue
    if store.full:
        store.evict_oldest()
        # an eviction is only a *fallback* when a fold was on the table
        # and had to be abandoned; with no foldable candidate it is the
        # same bounded-memory eviction L-BFGS performs
        state.fallbacks += (1 if fold_failed else 0) + _admit(store, new_pair)
        return MemoryEdit(action=ACTION_EVICT_APPEND, removed_index=0)
    drops = _admit(store, new_pair)
    if drops:
        # near-dependent but nothing foldable: pairs had to be shed to
        # keep the store's Gram factorizable
        state.fallbacks += drops
        return MemoryEdit(action=ACTION_EVICT_APPEND, removed_index=0)
    return MemoryEdit(action=ACTION_APPEND)


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

def _build_store(n: int, config: SolverConfig,
                 w0: InitialMatrix) -> PairStore:
    if config.mode == MODE_FULL_BFGS:
        return PairStore(int(config.max_iters) + 1, w0,
                         maintain_factors=False)
    if config.mode == MODE_LBFGS:
        return PairStore(config.memory, w0, maintain_factors=False)
    return PairStore(config.memory, w0, maintain_factors=True)


def _direction_initial(state: SolverState, config: SolverConfig):
    if config.scale_initial and state.store.pairs:
        newest = state.store.pairs[-1]
        gamma = float(newest.s @ newest.y) / float(newest.y @ newest.y)
        if gamma > 0.0 and np.isfinite(gamma):
            return InitialMatrix.scaled_identity(gamma, state.initial.n)
    return state.initial


def minimize(problem, x0, config: Optional[SolverConfig] = None) -> SolverReport:
    """Run the configured quasi-Newton method from x0.

    Stops when ||g||_inf <= grad_tol * max(1, ||g0||_inf), when max_iters
    is exhausted, or when the line search fails outright.  Pairs enter
    the store only from line searches that satisfied both Wolfe
    conditions (or from exact quadratic steps).
    """
    config = config or SolverConfig()
    x = np.ascontiguousarray(x0, dtype=float).copy()
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise InvalidInput("x0 must be a finite vector")
    n = x.shape[0]
    w0 = config.initial_matrix if config.initial_matrix is not None \
        else InitialMatrix.scaled_identity(1.0, n)
    if w0.n != n:
        raise InvalidInput(f"initial matrix is {w0.n}-dimensional, "
                           f"problem is {n}-dimensional")
    if config.line_search == LINE_SEARCH_EXACT \
            and getattr(problem, "hessian", None) is None:
        raise InvalidInput("exact line search needs problem.hessian")

    store = _build_store(n, config, w0)
    f = float(problem.f(x))
    g = np.asarray(problem.grad(x), dtype=float)
    state = SolverState(x=x, f=f, g=g, d=None, alpha=0.0, k=0, store=store,
                        initial=w0, funcs=1)
    threshold = config.grad_tol * max(1.0, float(np.max(np.abs(g))))
    trace: Optional[List[TraceRecord]] = [] if config.keep_trace else None

    status = STATUS_ITER_LIMIT
    while True:
        grad_inf = float(np.max(np.abs(state.g)))
        if grad_inf <= threshold:
            status = STATUS_CONVERGED
            break
        if state.k >= int(config.max_iters):
            status = STATUS_ITER_LIMIT
            break

        initial = _direction_initial(state, config)
        d = -two_loop_apply(initial, store.pairs, state.g)
        state.d = d

        accepted = True
        if config.line_search == LINE_SEARCH_EXACT:
            alpha = exact_quadratic_step(problem.hessian, state.g, d)
            s = alpha * d
            x_new = state.x + s
            f_new = float(problem.f(x_new))
            g_new = np.asarray(problem.grad(x_new), dtype=float)
            evals = 1
        else:
            try:
                ls = weak_wolfe_search(problem, state.x, state.f, state.g, d,
                                       config.wolfe)
            except (NotDescent, MaxBisections):
                status = STATUS_LINESEARCH_FAILURE
                break
            alpha = ls.alpha
            s = alpha * d
            x_new = state.x + s
            f_new = ls.f_new
            g_new = ls.g_new
            evals = ls.func_evals
            accepted = ls.status == linesearch.STATUS_ACCEPTED

        state.funcs += evals
        y = g_new - state.g
        action = "no_pair"
        if accepted and float(s @ y) > 0.0:
            edit = update_memory(state, CurvaturePair(s, y), config)
            action = edit.action
        state.x, state.f, state.g, state.alpha = x_new, f_new, g_new, alpha
        state.k += 1
        if trace is not None:
            trace.append(TraceRecord(
                k=state.k, f=state.f,
                grad_inf=float(np.max(np.abs(state.g))), alpha=alpha,
                func_evals=evals, store_size=len(store.pairs),
                action=action, direction=d))

    return SolverReport(x=state.x, f=state.f,
                        grad_inf=float(np.max(np.abs(state.g))),
                        iters=state.k, funcs=state.funcs, aggs=state.aggs,
                        fallbacks=state.fallbacks, status=status,
                        trace=trace)
