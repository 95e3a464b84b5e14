"""Exception types raised by stdemand."""

import numpy as np


class InvalidCovarianceError(ValueError):
    """A covariance matrix is not symmetric positive definite."""


class PeriodOutOfRangeError(ValueError):
    """A model was asked about a period it cannot predict."""


class InsufficientDataError(ValueError):
    """Too few events to fit or predict."""


class DegenerateSeriesError(ValueError):
    """A series has zero variance, so its autocorrelation is undefined."""


class SimplexBoundaryError(ValueError):
    """A weight vector touches the simplex boundary and has no logit image."""


class SingularSystemError(np.linalg.LinAlgError):
    """The warping system ``I + lambda L K`` is numerically singular."""

    def __init__(self, lam, cond=None):
        self.lam = lam
        self.cond = cond
        msg = f"I + lambda*L*K is numerically singular for lambda={lam!r}"
        if cond is not None:
            msg += f" (condition number {cond:.3g})"
        super().__init__(msg)


class CrossValidationError(RuntimeError):
    """Every candidate of a cross-validation grid failed."""

    def __init__(self, failures):
        self.failures = dict(failures)
        listing = "; ".join(f"lambda={lam}, h={h}: {why}" for (lam, h), why in self.failures.items())
        super().__init__(f"every cross-validation candidate failed: {listing}")
