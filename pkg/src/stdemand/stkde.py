"""Spatio-temporal KDE with per-cell informativeness weights.

Each historical event is weighted by how informative its lag ``t - u`` is
for the target period, through a four-parameter weight function fitted per
spatial cell to the autocorrelation of that cell's demand share. The
prediction is the weighted Gaussian KDE of the history.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from ._validation import ForecasterMixin, check_bandwidth, check_event_log, check_forecast_periods
from .core import (
    EventLog,
    GaussianKDEDensity,
    SpatialDomain,
    TimeGrid,
    per_period_counts,
    silverman_bandwidth,
    trailing_window,
)
from .exceptions import DegenerateSeriesError, InsufficientDataError

logger = logging.getLogger(__name__)

DAY = 24
WEEK = 168
MAX_LAG = 336
RHO_GRID = np.linspace(0.0, 1.0, 21)
RHO2_GRID = np.array([0.8, 0.85, 0.9, 0.93, 0.95, 0.96, 0.97, 0.98, 0.99, 0.995, 0.999, 0.9999, 1.0])


@dataclass(frozen=True, eq=False)
class CellPartition:
    """Equal rectangles tiling the bbox: ``nx`` columns by ``ny`` rows, ids row-major from the bottom."""

    domain: SpatialDomain
    nx: int = 4
    ny: int = 5

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def cell_of(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        xmin, _, ymin, _ = self.domain.bbox
        ix = np.floor((xy[:, 0] - xmin) / self.domain.width * self.nx).astype(int)
        iy = np.floor((xy[:, 1] - ymin) / self.domain.height * self.ny).astype(int)
        return np.clip(iy, 0, self.ny - 1) * self.nx + np.clip(ix, 0, self.nx - 1)

    def bounds(self, cell):
        iy, ix = divmod(int(cell), self.nx)
        xmin, _, ymin, _ = self.domain.bbox
        w, h = self.domain.width / self.nx, self.domain.height / self.ny
        return (xmin + ix * w, xmin + (ix + 1) * w, ymin + iy * h, ymin + (iy + 1) * h)


@dataclass
class RhoParams:
    """``(n_cells, 4)`` array of ``(rho1, rho2, rho3, rho4)`` per cell, all in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1, 4)
        if np.any((self.values < 0) | (self.values > 1)) or not np.all(np.isfinite(self.values)):
            raise ValueError("rho parameters must lie in [0, 1]")

    def __len__(self):
        return len(self.values)

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["cell_id", "rho1", "rho2", "rho3", "rho4"])
            for cell, row in enumerate(self.values.tolist()):
                writer.writerow([cell] + [repr(v) for v in row])
        return path

    @classmethod
    def read_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        order = np.argsort(data[:, 0])
        return cls(data[order, 1:5])


def weight(lag, rho):
    """Informativeness of an event ``lag`` periods back.

    ``rho1**lag + rho2**lag * rho3**sin^2(pi lag / 24) * rho4**sin^2(pi lag / 168)``.
    ``lag`` may be an array and ``rho`` an array whose last axis has length 4;
    they broadcast. Lags are reduced modulo each seasonal period before the
    sine, so exact multiples of a day or week give an exponent of exactly 0.
    """
    lag = np.asarray(lag)
    if np.any(lag < 0):
        raise ValueError("lag must be non-negative")
    rho = np.asarray(rho, dtype=float)
    r1, r2, r3, r4 = rho[..., 0], rho[..., 1], rho[..., 2], rho[..., 3]
    s1 = np.sin(np.pi * (lag % DAY) / DAY) ** 2
    s2 = np.sin(np.pi * (lag % WEEK) / WEEK) ** 2
    out = r1**lag + r2**lag * r3**s1 * r4**s2
    return out if out.ndim else float(out)


def cell_density_series(log: EventLog, cells: CellPartition) -> np.ndarray:
    """``(n_cells, T)`` share of each period's events falling in each cell (0 for empty periods)."""
    T = log.grid.T
    counts = np.zeros((cells.n_cells, T))
    np.add.at(counts, (cells.cell_of(log.xy), log.t), 1.0)
    return counts / np.maximum(1, per_period_counts(log))[None, :]


def acf(series, max_lag) -> np.ndarray:
    """Sample autocorrelation at lags ``0..max_lag`` (biased estimator, ``acf[0] == 1``)."""
    x = np.asarray(series, dtype=float)
    T = len(x)
    if not (1 <= max_lag < T):
        raise ValueError(f"need 1 <= max_lag < T, got max_lag={max_lag}, T={T}")
    x = x - x.mean()
    gamma0 = x @ x
    if gamma0 <= 1e-14 * max(1.0, T):
        raise DegenerateSeriesError("series has zero variance")
    n = 1 << (2 * T - 1).bit_length()
    f = np.fft.rfft(x, n)
    cov = np.fft.irfft(f * np.conj(f), n)[: max_lag + 1]
    out = cov / gamma0
    out[0] = 1.0
    return out


def _nugget_scale(w, target, mask):
    den = float(np.sum(mask * w * w))
    return min(max(float(np.sum(mask * target * w)) / den, 0.0), 1.0) if den > 0 else 0.0


def _fit_objective(rho, lags, target, mask, nugget=True):
    w = weight(lags, np.clip(rho, 0.0, 1.0)) / 2.0
    c = _nugget_scale(w, target, mask) if nugget else 1.0
    return float(np.sum(mask * (c * w - target) ** 2))


def _grid_search(acfs, lags, nugget=True):
    """Best coarse-grid rho per row of ``acfs`` (shape ``(k, L)``).

    Candidate curves are ``(A1_i + S_k) / 2`` with ``A1`` the rho1 term and
    ``S`` the seasonal rho2 term; the squared error expands into inner
    products, so every candidate is scored with a few matrix products.
    """
    s1 = np.sin(np.pi * (lags % DAY) / DAY) ** 2
    s2 = np.sin(np.pi * (lags % WEEK) / WEEK) ** 2
    g = RHO_GRID[:, None]
    A1 = g**lags / 2.0  # (21, L)
    A2 = RHO2_GRID[:, None] ** lags  # (5, L)
    A3 = g**s1
    A4 = g**s2
    S = (A2[:, None, None, :] * A3[None, :, None, :] * A4[None, None, :, :]).reshape(-1, len(lags)) / 2.0
    best = []
    for a in acfs:
        m = (a > 0).astype(float)
        target = np.where(a > 0, a, 0.0)
        num = (S @ (m * target))[:, None] + (A1 @ (m * target))[None, :]  # <t, w>
        den = ((S * S) @ m)[:, None] + 2.0 * ((S * m) @ A1.T) + ((A1 * A1) @ m)[None, :]  # <w, w>
        if nugget:
            c = np.clip(num / np.where(den > 0, den, 1.0), 0.0, 1.0)
        else:
            c = 1.0
        obj = c * c * den - 2.0 * c * num
        k = int(np.argmin(obj))
        s_idx, i = divmod(k, len(RHO_GRID))
        i2, rest = divmod(s_idx, len(RHO_GRID) ** 2)
        i3, i4 = divmod(rest, len(RHO_GRID))
        best.append((RHO_GRID[i], RHO2_GRID[i2], RHO_GRID[i3], RHO_GRID[i4]))
    return np.array(best)


def fit_rhos(acf_values, max_lag=MAX_LAG, nugget=True) -> RhoParams:
    """Fit the shape of ``weight / weight(0)`` to the positive part of each cell's ACF.

    ``acf_values`` is a sequence with one entry per cell: an ACF over lags
    ``0..max_lag`` or ``None`` for a degenerate cell. Each fit is a coarse grid
    search followed by bounded Nelder-Mead, keeping whichever is better.
    Degenerate cells get ``(0, median rho2, 1, 1)``.

    With ``nugget`` the curve is ``c * weight / weight(0)`` with the least-squares
    ``c`` in [0, 1]: counting noise drops the sample ACF below 1 right after lag 0,
    and ``c`` absorbs that jump so the rhos describe the decay alone. ``c = 1``
    is the plain fit.
    """
    if max_lag < 2 * WEEK:
        raise ValueError(f"max_lag must cover two weeks ({2 * WEEK}), got {max_lag}")
    lags = np.arange(1, max_lag + 1)
    rows, ok = [], []
    for c, a in enumerate(acf_values):
        if a is None:
            continue
        a = np.asarray(a, dtype=float)
        if len(a) < max_lag + 1:
            raise ValueError(f"cell {c}: ACF has {len(a)} lags, need {max_lag + 1}")
        rows.append(a[1 : max_lag + 1])
        ok.append(c)
    out = np.empty((len(acf_values), 4))
    if rows:
        acfs = np.array(rows)
        starts = _grid_search(acfs, lags, nugget)
        for c, a, x0 in zip(ok, acfs, starts):
            mask = (a > 0).astype(float)
            target = np.where(a > 0, a, 0.0)
            args = (lags, target, mask, nugget)
            f0 = _fit_objective(x0, *args)
            res = minimize(
                _fit_objective, x0, args=args, method="Nelder-Mead",
                bounds=[(0.0, 1.0)] * 4,
                options={"xatol": 1e-8, "fatol": 1e-14, "maxiter": 4000},
            )
            x = np.clip(res.x, 0.0, 1.0)
            out[c] = x if _fit_objective(x, *args) < f0 else x0
        rho2 = float(np.median(out[ok, 1]))
    else:
        rho2 = 0.99
    for c in range(len(acf_values)):
        if c not in ok:
            logger.info("cell %d has a degenerate demand series; using default rhos", c)
            out[c] = (0.0, rho2, 1.0, 1.0)
    return RhoParams(out)


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


@dataclass
class StkdeModel:
    """Fitted state: the history window, per-cell rhos, bandwidth and cells."""

    history: EventLog
    rhos: RhoParams
    h: float
    cells: CellPartition
    weight_floor: float = 1e-6

    def __post_init__(self):
        self.h = check_bandwidth(self.h)
        if len(self.rhos) != self.cells.n_cells:
            raise ValueError("need one rho quadruple per cell")
        self._event_rho = self.rhos.values[self.cells.cell_of(self.history.xy)]

    @property
    def T_train(self):
        return self.history.grid.T

    def weights(self, t):
        """Indices and weights of the history events used at period ``t``."""
        w = weight(t - self.history.t, self._event_rho)
        top = w.max() if len(w) else 0.0
        if not top > 0:
            logger.warning("all informativeness weights vanish at period %d; using an unweighted KDE", t)
            return np.arange(len(w)), np.ones(len(w))
        keep = np.flatnonzero(w >= self.weight_floor * top)
        return keep, w[keep]


class _WeightCache:
    def __init__(self, fn, size=4):
        self.fn = fn
        self.size = size
        self.store = {}

    def __call__(self, t):
        hit = self.store.get(t)
        if hit is None:
            hit = self.fn(t)
            if len(self.store) >= self.size:
                self.store.pop(next(iter(self.store)))
            self.store[t] = hit
        return hit


def predict(model: StkdeModel, t_future) -> GaussianKDEDensity:
    """Weighted KDE for the requested future period(s); weights are computed lazily per period."""
    periods = check_forecast_periods(t_future, model.T_train)
    if len(model.history) == 0:
        raise InsufficientDataError("the history window holds no events")
    return GaussianKDEDensity(
        model.history.xy, model.h, model.history.domain, periods,
        weights=_WeightCache(model.weights), key=lambda t: t,
    )


class SpatioTemporalKDE(ForecasterMixin, BaseEstimator):
    """Gaussian KDE weighted by lag-dependent, per-cell informativeness.

    Parameters
    ----------
    n_cells : tuple of int, default=(4, 5)
        Columns and rows of the cell tiling used for the weight parameters.
    max_lag : int, default=336
    bandwidth : float or None
        Kernel standard deviation in km; ``None`` uses the Silverman rule on
        the history window.
    weeks_back : int, default=8
        Length of the kernel history window.
    weight_floor : float, default=1e-6
        Events weighing less than this fraction of the largest weight are skipped.
    nugget : bool, default=True
        Fit the weight curve up to a scale in [0, 1] (see :func:`fit_rhos`).
    """

    method = "stkde"

    def __init__(self, n_cells=(4, 5), max_lag=MAX_LAG, bandwidth=None, weeks_back=8,
                 weight_floor=1e-6, nugget=True):
        self.n_cells = n_cells
        self.max_lag = max_lag
        self.bandwidth = bandwidth
        self.weeks_back = weeks_back
        self.weight_floor = weight_floor
        self.nugget = nugget

    def fit(self, X, y=None):
        log = check_event_log(X)
        cells = CellPartition(log.domain, *self.n_cells)
        series = cell_density_series(log, cells)
        acfs = []
        for row in series:
            try:
                acfs.append(acf(row, self.max_lag))
            except DegenerateSeriesError:
                acfs.append(None)
        history = trailing_window(log, self.weeks_back)
        if len(history) == 0:
            raise InsufficientDataError("no events in the history window")
        h = self.bandwidth if self.bandwidth is not None else silverman_bandwidth(history.xy)
        self.acf_ = acfs
        self.cells_ = cells
        self.rhos_ = fit_rhos(acfs, self.max_lag, self.nugget)
        self.bandwidth_ = float(h)
        self.model_ = StkdeModel(history, self.rhos_, h, cells, self.weight_floor)
        return self

    def _predict(self, periods):
        return predict(self.model_, periods)

    def to_dict(self):
        m = self.model_
        return {
            "method": self.method,
            "params": {**self.get_params(), "n_cells": list(self.n_cells)},
            "domain": m.history.domain.to_dict(),
            "grid": m.history.grid.to_dict(),
            "bandwidth": m.h,
            "rhos": m.rhos.values.tolist(),
            "history": {"t": m.history.t.tolist(), "xy": m.history.xy.tolist()},
        }

    @classmethod
    def from_dict(cls, data):
        params = dict(data["params"])
        params["n_cells"] = tuple(params["n_cells"])
        est = cls(**params)
        domain = SpatialDomain.from_dict(data["domain"])
        grid = TimeGrid.from_dict(data["grid"])
        history = EventLog(data["history"]["t"], data["history"]["xy"], grid, domain,
                           check_domain=False)
        est.cells_ = CellPartition(domain, *est.n_cells)
        est.rhos_ = RhoParams(data["rhos"])
        est.bandwidth_ = data["bandwidth"]
        est.model_ = StkdeModel(history, est.rhos_, est.bandwidth_, est.cells_, est.weight_floor)
        return est
