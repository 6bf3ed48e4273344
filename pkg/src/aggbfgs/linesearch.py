"""Line searches.

The weak-Wolfe search is the pair factory for every solver here: whenever
it accepts a step, the curvature condition forces s'y > 0, which is what
the BFGS update and the aggregation construction both require.  The exact
quadratic search exists for experiment generators, where the paper-style
protocol minimizes exactly along each direction.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (InvalidInput, MaxBisections, NonpositiveCurvatureDirection,
                     NotDescent)

STATUS_ACCEPTED = "accepted"
STATUS_MAX_BISECTIONS = "max_bisections"


@dataclass(frozen=True)
class WolfeParams:
    """Constants for the bracketing weak-Wolfe search.

    Defaults are the conventional BFGS choices: a permissive Armijo
    constant, a loose curvature constant, unit first trial.
    """

    c1: float = 1e-4
    c2: float = 0.9
    max_bisections: int = 50
    initial_step: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.c1 < self.c2 < 1.0):
            raise InvalidInput(
                f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.max_bisections < 1:
            raise InvalidInput("max_bisections must be at least 1")
        if not (np.isfinite(self.initial_step) and self.initial_step > 0.0):
            raise InvalidInput("initial_step must be positive and finite")


@dataclass
class LineSearchResult:
    alpha: float
    f_new: float
    g_new: np.ndarray
    func_evals: int
    status: str


def weak_wolfe_search(problem, x, f, g, d,
                      params: Optional[WolfeParams] = None) -> LineSearchResult:
    """Find alpha with f(x+ad) <= f + c1*a*g'd and g(x+ad)'d >= c2*g'd.

    Bracket-then-bisect: grow the step while the curvature condition
    fails with Armijo holding (no upper bracket yet), shrink once Armijo
    fails, bisect once both ends exist.  Each trial costs one objective
    and one gradient evaluation.

    If the budget runs out, the best Armijo-satisfying trial (lowest
    objective value) is returned with a failure status; the caller
    decides whether its curvature is usable.  MaxBisections is raised
    only if not a single trial satisfied Armijo.
    """
    params = params or WolfeParams()
    slope = float(g @ d)
    if not slope < 0.0:
        raise NotDescent(f"directional derivative {slope:.3e} is not negative")

    lo = 0.0
    hi = np.inf
    alpha = params.initial_step
    best = None  # (alpha, f, g) of the lowest-f Armijo point seen
    evals = 0
    for _ in range(params.max_bisections):
        f_new = float(problem.f(x + alpha * d))
        g_new = problem.grad(x + alpha * d)
        evals += 1
        if f_new > f + params.c1 * alpha * slope or not np.isfinite(f_new):
            hi = alpha
        else:
            if best is None or f_new < best[1]:
                best = (alpha, f_new, g_new)
            if float(g_new @ d) < params.c2 * slope:
                lo = alpha
            else:
                return LineSearchResult(alpha=alpha, f_new=f_new, g_new=g_new,
                                        func_evals=evals,
                                        status=STATUS_ACCEPTED)
        alpha = 2.0 * lo if np.isinf(hi) else 0.5 * (lo + hi)
    if best is None:
        raise MaxBisections(
            f"no Armijo point in {params.max_bisections} trials "
            f"(slope {slope:.3e})")
    return LineSearchResult(alpha=best[0], f_new=best[1], g_new=best[2],
                            func_evals=evals, status=STATUS_MAX_BISECTIONS)


def exact_quadratic_step(a_apply, g, d) -> float:
    """Exact minimizer of a quadratic along d: alpha = -g'd / d'Ad.

    a_apply is either a callable v -> Av or a dense matrix.
    """
    d = np.asarray(d, dtype=float)
    g = np.asarray(g, dtype=float)
    ad = a_apply(d) if callable(a_apply) else np.asarray(a_apply) @ d
    curvature = float(d @ ad)
    if not curvature > 0.0:
        raise NonpositiveCurvatureDirection(
            f"d'Ad = {curvature:.3e} along the requested direction")
    return -float(g @ d) / curvature
