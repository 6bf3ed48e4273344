"""Test problems and randomized pair-stream generators.

Two consumers with different needs share this module.  The matrix-level
experiments want *pair streams*: curvature pairs from a mock quadratic
run, optionally with an exactly dependent extra pair planted for the
equivalence studies.  The solver benchmark wants *problems*: analytic
objectives with exact gradients across a range of dimensions and
conditioning, registered by name for the CLI.

Determinism contract: every generator takes an explicit seed (or seed
key sequence) and uses an isolated Generator instance; equal seeds give
bitwise-equal outputs.
"""
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CurvatureViolation, InvalidInput
from .pairs import CurvaturePair

DEFAULT_NOISE_SCALE = 0.1
DEFAULT_TARGET_COND = 1e4
RETRY_LIMIT = 100


@dataclass(frozen=True, eq=False)
class Problem:
    """Analytic objective with an exact gradient.

    f and grad are plain functions of x (no instance state), so calling
    problem.f(x) works directly.  minimizer/f_opt are optional exact
    answers; hessian is set for quadratics (experiment generators need
    the matrix itself); convex marks problems where any reasonable
    quasi-Newton run must converge.
    """

    name: str
    dim: int
    f: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    x0: np.ndarray
    minimizer: Optional[np.ndarray] = None
    f_opt: Optional[float] = None
    hessian: Optional[np.ndarray] = None
    convex: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.x0.shape != (self.dim,):
            raise InvalidInput(
                f"{self.name}: x0 shape {self.x0.shape} vs dim {self.dim}")


def gradient_check(problem: Problem, x, max_components: int = 120,
                   rng=None) -> float:
    """Max relative gap between grad(x) and central differences.

    Steps are 1e-6*(1+|x_i|) per component; the gap is measured relative
    to max(1, ||g||_inf).  For large problems a random subset of
    components is checked.
    """
    x = np.asarray(x, dtype=float)
    g = problem.grad(x)
    scale = max(1.0, float(np.max(np.abs(g))))
    n = x.shape[0]
    if n <= max_components:
        idx = np.arange(n)
    else:
        idx = (rng or np.random.default_rng(0)).choice(
            n, size=max_components, replace=False)
    worst = 0.0
    for i in idx:
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (problem.f(xp) - problem.f(xm)) / (2.0 * h)
        worst = max(worst, abs(fd - g[i]) / scale)
    return worst


# --------------------------------------------------------------------------
# analytic problems
# --------------------------------------------------------------------------

def rosenbrock(variant: str = "classic2d", n: int = 2) -> Problem:
    """The banana function: classic two-dimensional or chained n-dimensional."""
    if variant == "classic2d":
        def f(x):
            return float(100.0 * (x[1] - x[0] ** 2) ** 2
                         + (1.0 - x[0]) ** 2)

        def grad(x):
            return np.array([
                -400.0 * x[0] * (x[1] - x[0] ** 2) - 2.0 * (1.0 - x[0]),
                200.0 * (x[1] - x[0] ** 2),
            ])

        return Problem(name="rosenbrock2d", dim=2, f=f, grad=grad,
                       x0=np.array([-1.2, 1.0]),
                       minimizer=np.ones(2), f_opt=0.0)
    if variant == "chained":
        if n < 2:
            raise InvalidInput("chained variant needs n >= 2")

        def f(x):
            return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2
                                + (1.0 - x[:-1]) ** 2))

        def grad(x):
            g = np.zeros_like(x)
            gap = x[1:] - x[:-1] ** 2
            g[:-1] = -400.0 * x[:-1] * gap - 2.0 * (1.0 - x[:-1])
            g[1:] += 200.0 * gap
            return g

        x0 = np.empty(n)
        x0[0::2] = -1.2
        x0[1::2] = 1.0
        return Problem(name=f"rosenbrock_chained_{n}", dim=n, f=f, grad=grad,
                       x0=x0, minimizer=np.ones(n), f_opt=0.0)
    raise InvalidInput(f"unknown variant {variant!r}")


def _spd_from_spectrum(n, cond, rng):
    basis, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eigs = np.logspace(0.0, np.log10(cond), n)
    return (basis * eigs) @ basis.T


def random_spd_quadratic(n: int, target_cond: float, seed) -> Problem:
    """f(x) = x'Ax/2 with A SPD and an eigenvalue ratio of target_cond.

    Deterministic per (seed, n, target_cond).  target_cond = 1 gives the
    identity exactly.
    """
    if not target_cond >= 1.0:
        raise InvalidInput("target_cond must be >= 1")
    rng = np.random.default_rng([_seed_key(seed), n,
                                 int(round(target_cond))])
    if target_cond == 1.0:
        hess = np.eye(n)
        rng.standard_normal((n, n))  # keep the x0 draw aligned across conds
    else:
        hess = _spd_from_spectrum(n, target_cond, rng)

    def f(x, _A=hess):
        return 0.5 * float(x @ (_A @ x))

    def grad(x, _A=hess):
        return _A @ x

    x0 = rng.standard_normal(n)
    return Problem(name=f"quadratic_{n}_cond{target_cond:.0e}", dim=n,
                   f=f, grad=grad, x0=x0, minimizer=np.zeros(n), f_opt=0.0,
                   hessian=hess, convex=True)


def _seed_key(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    raise InvalidInput(f"seed must be an integer, got {type(seed).__name__}")


def separable_quartic(n: int = 200) -> Problem:
    """f = sum_i c_i (x_i^4 + x_i^2), c_i = (i+1)/n: convex, separable,
    with per-coordinate curvature spread over two orders of magnitude."""
    c = np.arange(1, n + 1) / float(n)

    def f(x, _c=c):
        return float(np.sum(_c * (x ** 4 + x ** 2)))

    def grad(x, _c=c):
        return _c * (4.0 * x ** 3 + 2.0 * x)

    return Problem(name=f"separable_quartic_{n}", dim=n, f=f, grad=grad,
                   x0=np.full(n, 2.0), minimizer=np.zeros(n), f_opt=0.0,
                   convex=True)


def log_cosh_sum(n: int = 300, seed: int = 7) -> Problem:
    """f = sum_i w_i log cosh(x_i - t_i): convex with bounded curvature."""
    rng = np.random.default_rng([seed, n])
    w = rng.uniform(0.5, 2.0, n)
    t = rng.uniform(-1.0, 1.0, n)

    def f(x, _w=w, _t=t):
        z = np.abs(x - _t)
        # log cosh z = z + log1p(exp(-2z)) - log 2, overflow-safe
        return float(np.sum(_w * (z + np.log1p(np.exp(-2.0 * z))
                                  - np.log(2.0))))

    def grad(x, _w=w, _t=t):
        return _w * np.tanh(x - _t)

    return Problem(name=f"log_cosh_{n}", dim=n, f=f, grad=grad,
                   x0=t + 1.5, minimizer=t.copy(), f_opt=0.0, convex=True)


def exp_penalty(n: int = 150) -> Problem:
    """f = sum_i (exp(x_i) - x_i): convex, minimized at the origin; large
    trial steps overflow the exponential and exercise the line search's
    non-finite rejection."""

    def f(x):
        with np.errstate(over="ignore"):
            return float(np.sum(np.exp(x) - x))

    def grad(x):
        with np.errstate(over="ignore"):
            return np.exp(x) - 1.0

    x0 = np.full(n, 0.5)
    x0[1::2] = -0.5
    return Problem(name=f"exp_penalty_{n}", dim=n, f=f, grad=grad, x0=x0,
                   minimizer=np.zeros(n), f_opt=float(n), convex=True)


def coupled_tridiagonal(n: int = 3000) -> Problem:
    """f = sum (x_i - 1)^2 - 0.3 sum x_i x_{i-1}: a well-conditioned convex
    quadratic with nearest-neighbor coupling, evaluated in O(n)."""

    def f(x):
        return float(np.sum((x - 1.0) ** 2) - 0.3 * np.sum(x[1:] * x[:-1]))

    def grad(x):
        g = 2.0 * (x - 1.0)
        g[1:] -= 0.3 * x[:-1]
        g[:-1] -= 0.3 * x[1:]
        return g

    return Problem(name=f"coupled_tridiagonal_{n}", dim=n, f=f, grad=grad,
                   x0=np.zeros(n), convex=True)


def bdqrtic(n: int = 100) -> Problem:
    """Banded quartic: each residual couples four consecutive coordinates
    and the final one."""
    if n < 5:
        raise InvalidInput("bdqrtic needs n >= 5")
    k = n - 4

    def _parts(x):
        lin = 3.0 - 4.0 * x[:k]
        quad = (x[:k] ** 2 + 2.0 * x[1:k + 1] ** 2 + 3.0 * x[2:k + 2] ** 2
                + 4.0 * x[3:k + 3] ** 2 + 5.0 * x[n - 1] ** 2)
        return lin, quad

    def f(x):
        lin, quad = _parts(x)
        return float(np.sum(lin ** 2) + np.sum(quad ** 2))

    def grad(x):
        lin, quad = _parts(x)
        g = np.zeros_like(x)
        g[:k] += -8.0 * lin + 4.0 * quad * x[:k]
        g[1:k + 1] += 8.0 * quad * x[1:k + 1]
        g[2:k + 2] += 12.0 * quad * x[2:k + 2]
        g[3:k + 3] += 16.0 * quad * x[3:k + 3]
        g[n - 1] += 20.0 * x[n - 1] * np.sum(quad)
        return g

    return Problem(name=f"bdqrtic_{n}", dim=n, f=f, grad=grad,
                   x0=np.ones(n))


def engval1(n: int = 60) -> Problem:
    """f = sum (x_i^2 + x_{i+1}^2)^2 - 4 x_i + 3 over consecutive pairs."""

    def f(x):
        t = x[:-1] ** 2 + x[1:] ** 2
        return float(np.sum(t ** 2) - 4.0 * np.sum(x[:-1])
                     + 3.0 * (x.shape[0] - 1))

    def grad(x):
        t = x[:-1] ** 2 + x[1:] ** 2
        g = np.zeros_like(x)
        g[:-1] += 4.0 * t * x[:-1] - 4.0
        g[1:] += 4.0 * t * x[1:]
        return g

    return Problem(name=f"engval1_{n}", dim=n, f=f, grad=grad,
                   x0=np.full(n, 2.0))


def nondia(n: int = 90) -> Problem:
    """All residuals lean on the first coordinate: f = (x_0 - 1)^2 +
    100 sum_i (x_0 - x_i^2)^2."""

    def f(x):
        return float((x[0] - 1.0) ** 2
                     + 100.0 * np.sum((x[0] - x[1:] ** 2) ** 2))

    def grad(x):
        gap = x[0] - x[1:] ** 2
        g = np.zeros_like(x)
        g[0] = 2.0 * (x[0] - 1.0) + 200.0 * np.sum(gap)
        g[1:] = -400.0 * gap * x[1:]
        return g

    return Problem(name=f"nondia_{n}", dim=n, f=f, grad=grad,
                   x0=np.full(n, -1.0))


# --------------------------------------------------------------------------
# registry and benchmark suite
# --------------------------------------------------------------------------

_REGISTRY = {
    "rosenbrock2d": lambda: rosenbrock("classic2d"),
    "rosenbrock_chained_50": lambda: rosenbrock("chained", 50),
    "rosenbrock_chained_500": lambda: rosenbrock("chained", 500),
    "quadratic_10_cond1e2": lambda: random_spd_quadratic(10, 1e2, 20240817),
    "quadratic_100_cond1e4": lambda: random_spd_quadratic(100, 1e4, 20240817),
    "quadratic_600_cond1e6": lambda: random_spd_quadratic(600, 1e6, 20240817),
    "separable_quartic_200": lambda: separable_quartic(200),
    "log_cosh_300": lambda: log_cosh_sum(300),
    "exp_penalty_150": lambda: exp_penalty(150),
    "coupled_tridiagonal_3000": lambda: coupled_tridiagonal(3000),
    "bdqrtic_100": lambda: bdqrtic(100),
    "engval1_60": lambda: engval1(60),
    "nondia_90": lambda: nondia(90),
}

# benchmark suite: everything with dim in [10, 3000]
SUITE_NAMES = (
    "quadratic_10_cond1e2",
    "quadratic_100_cond1e4",
    "quadratic_600_cond1e6",
    "rosenbrock_chained_50",
    "rosenbrock_chained_500",
    "separable_quartic_200",
    "log_cosh_300",
    "exp_penalty_150",
    "coupled_tridiagonal_3000",
    "bdqrtic_100",
    "engval1_60",
    "nondia_90",
)


def get_problem(name: str) -> Problem:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise InvalidInput(
            f"unknown problem {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory()


def list_problems():
    return sorted(_REGISTRY)


def benchmark_suite():
    return [get_problem(name) for name in SUITE_NAMES]


# --------------------------------------------------------------------------
# pair streams
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PairStreamSpec:
    """Recipe for a mock-run pair stream on a random SPD quadratic.

    seed may be an int or a sequence of ints (a composed stream key).
    steps defaults to m.  noise_scale is the fraction of the gradient
    norm added as noise to each steepest-descent direction.
    """

    seed: Union[int, Tuple[int, ...]]
    n: int
    m: int
    steps: Optional[int] = None
    noise_scale: float = DEFAULT_NOISE_SCALE
    target_cond: float = DEFAULT_TARGET_COND

    @property
    def step_count(self) -> int:
        return self.m if self.steps is None else self.steps


class PlantedDependence(NamedTuple):
    pair: CurvaturePair       # (s0, y0) with s0 = S @ tau exactly
    tau: np.ndarray           # ascending coefficients over the stream pairs


def mock_pair_sequence(spec: PairStreamSpec, plant_dependence: bool = False):
    """Curvature pairs from noisy steepest descent with exact line search.

    The run is *restarted* at a fixed reference point every step: the
    gradient is never advanced, so the steps stay scattered instead of
    collapsing toward one dominant direction.  Every pair satisfies
    s'y > 0 because the quadratic is SPD and each trial direction is
    retried until it has positive curvature and negative slope.

    With plant_dependence, draws tau AFTER the stream (so the stream
    itself is unchanged) and synthesizes s0 = S tau, y0 = A s0 — the
    backward-step evaluation, exact on a quadratic.
    """
    if spec.m > spec.n:
        raise InvalidInput(f"m = {spec.m} exceeds n = {spec.n}")
    if plant_dependence and spec.step_count != spec.m:
        raise InvalidInput("planting expects steps == m")
    seed = spec.seed
    key = list(seed) if isinstance(seed, (tuple, list)) else [seed, spec.n,
                                                              spec.m]
    rng = np.random.default_rng(key)
    hess = _spd_from_spectrum(spec.n, spec.target_cond, rng)
    x_fix = rng.standard_normal(spec.n)
    g = hess @ x_fix
    pairs = []
    for _ in range(spec.step_count):
        for _attempt in range(RETRY_LIMIT):
            d = -g + spec.noise_scale * np.linalg.norm(g) \
                * rng.standard_normal(spec.n)
            curvature = d @ hess @ d
            if curvature > 0.0 and g @ d < 0.0:
                break
        else:
            raise CurvatureViolation(
                f"no descent direction with positive curvature in "
                f"{RETRY_LIMIT} tries")
        alpha = -(g @ d) / curvature
        s = alpha * d
        pairs.append(CurvaturePair(s, hess @ s))
    planted = None
    if plant_dependence:
        tau = rng.standard_normal(spec.m)
        S = np.column_stack([p.s for p in pairs])
        s0 = S @ tau
        planted = PlantedDependence(pair=CurvaturePair(s0, hess @ s0),
                                    tau=tau)
    return pairs, planted
