"""Input validation shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .core import EventLog, SpatialDomain, TimeGrid, _as_range, infer_domain
from .exceptions import InsufficientDataError, PeriodOutOfRangeError


def check_event_log(X, *, allow_empty=False) -> EventLog:
    """Accept an :class:`EventLog` or an ``(n, 3)`` array of ``(t, x, y)`` rows.

    Arrays get a whole-week time grid and the integer-km bounding box of the
    points as domain.
    """
    if isinstance(X, EventLog):
        log = X
    else:
        arr = np.asarray(X, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"expected an EventLog or an (n, 3) array of (t, x, y), got {arr.shape}")
        t = arr[:, 0]
        if np.any(t != np.floor(t)):
            raise ValueError("period indices must be integers")
        n_periods = int(t.max()) + 1 if len(t) else 1
        grid = TimeGrid(-(-n_periods // 168) * 168)
        domain = infer_domain(arr[:, 1:]) if len(arr) else SpatialDomain((0, 1, 0, 1))
        log = EventLog(t.astype(np.int64), arr[:, 1:], grid, domain)
    if not allow_empty and len(log) == 0:
        raise InsufficientDataError("the event log is empty")
    return log


def check_forecast_periods(t_future, T_train) -> range:
    """Requested prediction periods as a contiguous range starting at or after ``T_train``."""
    periods = _as_range(t_future)
    if periods.start < T_train:
        raise PeriodOutOfRangeError(
            f"period {periods.start} lies inside the training range [0, {T_train}); "
            "predictions are for future periods only"
        )
    return periods


def check_bandwidth(h):
    h = float(h)
    if not np.isfinite(h) or h <= 0:
        raise ValueError(f"bandwidth must be a positive number, got {h}")
    return h


class ForecasterMixin:
    """``predict`` / ``score`` for estimators whose predictions are density models."""

    def predict(self, t_future):
        """Predictive :class:`~stdemand.core.DensityModel` for one period or a contiguous range."""
        check_is_fitted(self)
        return self._predict(t_future)

    def score(self, X, y=None):
        """Mean log predictive density per test event (higher is better)."""
        from .evaluation import mean_neg_log_lik

        test = check_event_log(X)
        model = self.predict(range(int(test.t[0]), int(test.t[-1]) + 1))
        return -mean_neg_log_lik(model, test)

    def save(self, path):
        from .io import save_model

        return save_model(self, path)
