"""Exception types shared across the package."""


class RobustcovError(Exception):
    """Base class for all estimation-related errors."""


class SingularScatterError(RobustcovError):
    """A scatter matrix failed its SPD factorization."""


class DegenerateScatterError(RobustcovError):
    """A candidate scatter has nonpositive or non-finite determinant."""


class DegenerateScaleError(RobustcovError):
    """Too many zero distances: the M-scale equation has no positive root."""


class ScaleConvergenceError(RobustcovError):
    """Root bracketing for a scale equation failed after expansion."""


class StartFailureError(RobustcovError):
    """No usable starting estimate could be produced."""


class TunabilityError(RobustcovError):
    """The requested tuning target is outside the estimator's reachable range."""


class EstimationError(RobustcovError):
    """An iterative estimator could not produce a valid result."""


class DataError(RobustcovError):
    """Input data failed validation (shape, finiteness, or parsing)."""
