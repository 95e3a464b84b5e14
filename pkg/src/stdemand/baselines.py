"""Competing methods: the MEDIC historical-count average and an unweighted KDE."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import shapely
from sklearn.base import BaseEstimator

from ._validation import ForecasterMixin, check_bandwidth, check_event_log, check_forecast_periods
from .core import (
    UNBOUNDED,
    DensityModel,
    EventLog,
    GaussianKDEDensity,
    SpatialDomain,
    TimeGrid,
    silverman_bandwidth,
    trailing_window,
)
from .exceptions import InsufficientDataError

logger = logging.getLogger(__name__)

#: A MEDIC "year" is 52 whole weeks so the week position is preserved.
WEEKS_PER_YEAR = 52
MEDIC_EPSILON = 0.25


@dataclass
class CountGrid:
    """Per-period event counts on a square tiling of the domain bbox.

    Cells along the upper edges are clipped to the bbox when its sides are
    not multiples of ``cell_size``.
    """

    domain: SpatialDomain
    grid: TimeGrid
    counts: np.ndarray  # (T, ncx, ncy) int
    cell_size: float = 1.0

    @classmethod
    def from_log(cls, log: EventLog, cell_size=1.0):
        x_edges, y_edges = cell_edges(log.domain, cell_size)
        ncx, ncy = len(x_edges) - 1, len(y_edges) - 1
        ix, iy = locate_cells(log.xy, x_edges, y_edges)
        counts = np.zeros((log.grid.T, ncx, ncy), dtype=np.int64)
        np.add.at(counts, (log.t, ix, iy), 1)
        return cls(log.domain, log.grid, counts, cell_size)

    @property
    def edges(self):
        return cell_edges(self.domain, self.cell_size)

    @property
    def shape(self):
        return self.counts.shape[1:]

    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2))

    def to_csv(self, path, include_zeros=False):
        """Write ``cell_x,cell_y,t,count`` rows; zero counts are skipped unless requested."""
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["cell_x", "cell_y", "t", "count"])
            if include_zeros:
                t, ix, iy = np.indices(self.counts.shape).reshape(3, -1)
            else:
                t, ix, iy = np.nonzero(self.counts)
            for a, b, c in zip(ix.tolist(), iy.tolist(), t.tolist()):
                writer.writerow([a, b, c, int(self.counts[c, a, b])])
        return path

    @classmethod
    def read_csv(cls, path, domain, grid, cell_size=1.0):
        x_edges, y_edges = cell_edges(domain, cell_size)
        counts = np.zeros((grid.T, len(x_edges) - 1, len(y_edges) - 1), dtype=np.int64)
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        if len(data):
            counts[data[:, 2], data[:, 0], data[:, 1]] = data[:, 3]
        return cls(domain, grid, counts, cell_size)


def cell_edges(domain: SpatialDomain, cell_size=1.0):
    xmin, xmax, ymin, ymax = domain.bbox

    def edges(lo, hi):
        e = lo + cell_size * np.arange(int(np.ceil((hi - lo) / cell_size - 1e-9)) + 1)
        e[-1] = hi
        return e

    return edges(xmin, xmax), edges(ymin, ymax)


def locate_cells(xy, x_edges, y_edges):
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    ix = np.clip(np.searchsorted(x_edges, xy[:, 0], side="right") - 1, 0, len(x_edges) - 2)
    iy = np.clip(np.searchsorted(y_edges, xy[:, 1], side="right") - 1, 0, len(y_edges) - 2)
    return ix, iy


def cell_areas(domain: SpatialDomain, x_edges, y_edges) -> np.ndarray:
    """Area of each cell inside the domain (exact polygon clipping under a mask)."""
    areas = np.outer(np.diff(x_edges), np.diff(y_edges))
    if domain.mask is None:
        return areas
    boxes = shapely.box(
        x_edges[:-1, None], y_edges[None, :-1], x_edges[1:, None], y_edges[None, 1:]
    )
    return shapely.area(shapely.intersection(boxes, domain._polygon))


def medic_periods(T_history, t_future, B, weeks, years):
    """History periods averaged for ``t_future``: the same week position in the
    ``weeks`` most recent available weeks, repeated ``years`` 52-week years back."""
    if weeks < 1 or years < 1:
        raise ValueError("weeks and years must be at least 1")
    limit = min(int(t_future), int(T_history))
    anchor = limit - 1 - ((limit - 1 - int(t_future)) % B)
    periods = np.array(
        [anchor - y * WEEKS_PER_YEAR * B - k * B for y in range(years) for k in range(weeks)]
    )
    if anchor < 0 or np.any(periods < 0):
        raise InsufficientDataError(
            f"MEDIC needs {weeks} weeks x {years} years of history before period {t_future}; "
            f"only {T_history} periods are available"
        )
    return periods


def medic_expected_counts(history: CountGrid, t_future, weeks=4, years=1) -> np.ndarray:
    sel = medic_periods(history.grid.T, t_future, history.grid.B, weeks, years)
    return history.counts[sel].sum(axis=0) / len(sel)


class MedicDensity(DensityModel):
    """Piecewise-constant density ``(count + eps) / sum(count + eps)`` over the count cells."""

    def __init__(self, history: CountGrid, weeks, years, epsilon=MEDIC_EPSILON,
                 periods=range(0, UNBOUNDED)):
        super().__init__(history.domain, periods)
        if epsilon <= 0:
            raise ValueError("epsilon must be positive so empty cells keep positive density")
        self.history = history
        self.weeks = weeks
        self.years = years
        self.epsilon = float(epsilon)
        self.x_edges, self.y_edges = history.edges
        self.areas = cell_areas(self.domain, self.x_edges, self.y_edges)
        self._expected = {}

    def period_key(self, t):
        return int(t) % self.history.grid.B

    def expected_counts(self, t) -> np.ndarray:
        key = self.period_key(t)
        if key not in self._expected:
            self._expected[key] = medic_expected_counts(self.history, t, self.weeks, self.years)
        return self._expected[key]

    def _unnormalized(self, pts, t):
        ix, iy = locate_cells(pts, self.x_edges, self.y_edges)
        return self.expected_counts(t)[ix, iy] + self.epsilon

    def _domain_mass(self, t):
        return float(np.sum((self.expected_counts(t) + self.epsilon) * self.areas))

    def cell_masses(self, x_edges, y_edges, t, sub=4):
        if np.array_equal(x_edges, self.x_edges) and np.array_equal(y_edges, self.y_edges):
            t = self.check_period(t)
            return (self.expected_counts(t) + self.epsilon) * self.areas / self.mass(t)
        return super().cell_masses(x_edges, y_edges, t, sub)

    def metadata(self):
        return {"model": type(self).__name__, "weeks": self.weeks, "years": self.years,
                "epsilon": self.epsilon}


def medic_predict(history: CountGrid, t_future, weeks=4, years=1, epsilon=MEDIC_EPSILON):
    """Per-cell mean of the selected historical counts, plus its density view."""
    density = MedicDensity(history, weeks, years, epsilon, periods=t_future)
    return density.expected_counts(t_future), density


def naive_kde_predict(log: EventLog, t_future, weeks_back=8, h=None) -> GaussianKDEDensity:
    """Unweighted Gaussian KDE of the last ``weeks_back`` weeks of ``log``."""
    periods = check_forecast_periods(t_future, log.grid.T)
    window = trailing_window(log, weeks_back)
    if len(window) == 0:
        raise InsufficientDataError("no events in the naive KDE window")
    h = silverman_bandwidth(window.xy) if h is None else check_bandwidth(h)
    return GaussianKDEDensity(window.xy, h, log.domain, periods)


class MEDIC(ForecasterMixin, BaseEstimator):
    """Industry averaging rule: mean of same-hour counts from preceding weeks and years.

    Parameters
    ----------
    weeks, years : int
        Counts averaged: ``weeks`` consecutive weeks, for each of ``years`` years.
    epsilon : float, default=0.25
        Pseudo-count per cell for the density view.
    cell_size : float, default=1.0
        Cell side in km.
    """

    method = "medic"

    def __init__(self, weeks=4, years=1, epsilon=MEDIC_EPSILON, cell_size=1.0):
        self.weeks = weeks
        self.years = years
        self.epsilon = epsilon
        self.cell_size = cell_size

    def fit(self, X, y=None):
        log = check_event_log(X)
        self.history_ = CountGrid.from_log(log, self.cell_size)
        medic_periods(log.grid.T, log.grid.T, log.grid.B, self.weeks, self.years)
        return self

    def _predict(self, periods):
        periods = check_forecast_periods(periods, self.history_.grid.T)
        return MedicDensity(self.history_, self.weeks, self.years, self.epsilon, periods)

    def expected_counts(self, t_future):
        return medic_expected_counts(self.history_, t_future, self.weeks, self.years)

    def to_dict(self):
        h = self.history_
        t, ix, iy = np.nonzero(h.counts)
        return {
            "method": self.method,
            "params": self.get_params(),
            "domain": h.domain.to_dict(),
            "grid": h.grid.to_dict(),
            "counts": {"t": t.tolist(), "cell_x": ix.tolist(), "cell_y": iy.tolist(),
                       "count": h.counts[t, ix, iy].tolist()},
        }

    @classmethod
    def from_dict(cls, data):
        est = cls(**data["params"])
        domain = SpatialDomain.from_dict(data["domain"])
        grid = TimeGrid.from_dict(data["grid"])
        x_edges, y_edges = cell_edges(domain, est.cell_size)
        counts = np.zeros((grid.T, len(x_edges) - 1, len(y_edges) - 1), dtype=np.int64)
        c = data["counts"]
        counts[c["t"], c["cell_x"], c["cell_y"]] = c["count"]
        est.history_ = CountGrid(domain, grid, counts, est.cell_size)
        return est


class NaiveKDE(ForecasterMixin, BaseEstimator):
    """Unweighted, unwarped Gaussian KDE over a trailing window.

    Parameters
    ----------
    bandwidth : float or None
        Kernel standard deviation (km); ``None`` applies the Silverman rule.
    weeks_back : int, default=8
    """

    method = "naivekde"

    def __init__(self, bandwidth=None, weeks_back=8):
        self.bandwidth = bandwidth
        self.weeks_back = weeks_back

    def fit(self, X, y=None):
        log = check_event_log(X)
        window = trailing_window(log, self.weeks_back)
        if len(window) == 0:
            raise InsufficientDataError("no events in the naive KDE window")
        self.history_ = window
        self.bandwidth_ = (
            silverman_bandwidth(window.xy) if self.bandwidth is None else check_bandwidth(self.bandwidth)
        )
        return self

    def _predict(self, periods):
        periods = check_forecast_periods(periods, self.history_.grid.T)
        return GaussianKDEDensity(self.history_.xy, self.bandwidth_, self.history_.domain, periods)

    def to_dict(self):
        w = self.history_
        return {
            "method": self.method,
            "params": self.get_params(),
            "domain": w.domain.to_dict(),
            "grid": w.grid.to_dict(),
            "bandwidth": self.bandwidth_,
            "history": {"t": w.t.tolist(), "xy": w.xy.tolist()},
        }

    @classmethod
    def from_dict(cls, data):
        est = cls(**data["params"])
        domain = SpatialDomain.from_dict(data["domain"])
        grid = TimeGrid.from_dict(data["grid"])
        est.history_ = EventLog(data["history"]["t"], data["history"]["xy"], grid, domain,
                                check_domain=False)
        est.bandwidth_ = data["bandwidth"]
        return est
