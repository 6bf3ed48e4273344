"""Exception types shared across the package."""


class AggBfgsError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(AggBfgsError):
    """A matrix that must be positive definite is not (numerically)."""


class NotPsd(AggBfgsError):
    """A matrix expected to be positive semidefinite has a clearly
    negative eigenvalue."""


class SingularTriangular(AggBfgsError):
    """Triangular solve hit a zero diagonal entry."""


class InvalidInput(AggBfgsError):
    """Malformed input (wrong shape, zero vector where nonzero required...)."""


class ShapeMismatch(AggBfgsError):
    """Two operands have incompatible shapes."""


class ZeroReference(AggBfgsError):
    """The reference matrix of a relative-error computation is zero."""


class CurvatureViolation(AggBfgsError):
    """A curvature pair has s'y <= 0."""


class NotParallel(AggBfgsError):
    """skip-update requested for displacements that are not parallel."""


class DependenceViolation(AggBfgsError):
    """Aggregation requested for a displacement that is not (numerically)
    in the span of the retained displacements."""


class ConstructionFailure(AggBfgsError):
    """The aggregation construction hit an inconsistency that exact
    arithmetic rules out (e.g. a clearly negative discriminant)."""


class DegenerateSpan(AggBfgsError):
    """Projection test invoked with an empty spanning set."""


class NotDescent(AggBfgsError):
    """Line search started along a non-descent direction."""


class MaxBisections(AggBfgsError):
    """Line search exhausted its bisection budget.

    Carries the best Armijo-satisfying point found so far, if any.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class NonpositiveCurvatureDirection(AggBfgsError):
    """Exact quadratic line search along a direction with d'Ad <= 0."""
