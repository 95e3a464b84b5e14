"""Scoring and comparison of predictive density models on held-out events."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import cell_edges, locate_cells
from .core import DensityModel, EventLog, GaussianKDEDensity, per_period_counts
from .exceptions import InsufficientDataError

DENSITY_FLOOR = 1e-12
REPORT_SCHEMA_VERSION = 1


def _period_groups(test: EventLog):
    periods, start = np.unique(test.t, return_index=True)
    stops = np.append(start[1:], len(test.t))
    return zip(periods.tolist(), start.tolist(), stops.tolist())


def log_scores(model: DensityModel, test: EventLog, floor=DENSITY_FLOOR):
    """Per-event ``-log max(f_t(s), floor)`` in test order, and the number of floored events."""
    out = np.empty(len(test))
    floored = 0
    for t, lo, hi in _period_groups(test):
        vals = np.asarray(model.evaluate(test.xy[lo:hi], t)).reshape(-1)
        floored += int(np.sum(vals < floor))
        out[lo:hi] = -np.log(np.maximum(vals, floor))
    return out, floored


def mean_neg_log_lik(model: DensityModel, test: EventLog, floor=DENSITY_FLOOR) -> float:
    """Mean negative log predictive density per test event (nats; smaller is better).

    Every test period must be supported by ``model``; densities below
    ``floor`` are raised to it so the score stays finite.
    """
    if len(test) == 0:
        raise InsufficientDataError("cannot score an empty test log")
    scores, _ = log_scores(model, test, floor)
    return float(math.fsum(scores) / len(scores))


def weekly_mean_volume(train: EventLog):
    """Default volume forecast: mean training count at the same week position."""
    B = train.grid.B
    counts = per_period_counts(train)
    b = np.arange(len(counts)) % B
    sums = np.bincount(b, weights=counts, minlength=B)
    n = np.bincount(b, minlength=B)
    means = np.divide(sums, n, out=np.full(B, counts.mean()), where=n > 0)
    return lambda t: float(means[int(t) % B])


def _delta_at(delta_hat, t):
    if callable(delta_hat):
        return float(delta_hat(t))
    return float(np.asarray(delta_hat)[t])


def _kde_cell_factors(model: GaussianKDEDensity, x_edges, y_edges):
    from scipy.special import ndtr

    key = (x_edges.tobytes(), y_edges.tobytes())
    cache = model.__dict__.setdefault("_cell_factor_cache", {})
    if key not in cache:
        c, h = model.centers, model.h
        mx = np.diff(ndtr((x_edges[None, :] - c[:, 0, None]) / h), axis=1)
        my = np.diff(ndtr((y_edges[None, :] - c[:, 1, None]) / h), axis=1)
        cache.clear()
        cache[key] = (mx, my)
    return cache[key]


def predicted_cell_probabilities(model: DensityModel, t, x_edges, y_edges):
    if isinstance(model, GaussianKDEDensity) and model.domain.mask is None:
        t = model.check_period(t)
        idx, w = model.active(t)
        mx, my = _kde_cell_factors(model, x_edges, y_edges)
        return (mx[idx] * w[:, None]).T @ my[idx] / w.sum() / model.mass(t)
    return model.cell_masses(x_edges, y_edges, t)


def rmse_counts(model: DensityModel, delta_hat, test: EventLog, cells=None, periods=None) -> float:
    """Root-mean-squared error of expected cell counts ``delta_hat_t * P(cell)``.

    ``cells`` is a pair of edge arrays (default: 1-km cells of the domain).
    ``delta_hat`` is a callable ``t -> volume`` or an array indexed by period.
    ``periods`` defaults to the span of the test events.
    """
    x_edges, y_edges = cell_edges(test.domain, 1.0) if cells is None else map(np.asarray, cells)
    if periods is None:
        if len(test) == 0:
            raise InsufficientDataError("cannot infer the scoring periods of an empty test log")
        periods = range(int(test.t[0]), int(test.t[-1]) + 1)
    ix, iy = locate_cells(test.xy, x_edges, y_edges)
    shape = (len(x_edges) - 1, len(y_edges) - 1)
    sq = 0.0
    cache = {}
    for t in periods:
        key = model.period_key(t)
        probs = cache.get(key)
        if probs is None:
            probs = predicted_cell_probabilities(model, t, x_edges, y_edges)
            cache = {key: probs}
        lo, hi = np.searchsorted(test.t, [t, t + 1])
        actual = np.zeros(shape)
        np.add.at(actual, (ix[lo:hi], iy[lo:hi]), 1.0)
        sq += float(np.sum((_delta_at(delta_hat, t) * probs - actual) ** 2))
    return math.sqrt(sq / (len(periods) * shape[0] * shape[1]))


@dataclass
class ModelScore:
    name: str
    loglik: float
    rmse: float | None
    events_scored: int
    periods_covered: int
    floored: int
    rank: int = 0


@dataclass
class EvaluationReport:
    scores: list
    metadata: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def __getitem__(self, name) -> ModelScore:
        for s in self.scores:
            if s.name == name:
                return s
        raise KeyError(name)

    def ranking(self):
        return [s.name for s in self.scores]

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "metadata": self.metadata,
            "models": [asdict(s) for s in self.scores],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        lines = [f"{'rank':>4}  {'model':<12} {'logLik':>10} {'RMSE':>10} {'events':>8} {'periods':>8} {'floored':>8}"]
        for s in self.scores:
            rmse = "-" if s.rmse is None else f"{s.rmse:.5f}"
            lines.append(
                f"{s.rank:>4}  {s.name:<12} {s.loglik:>10.5f} {rmse:>10} {s.events_scored:>8} "
                f"{s.periods_covered:>8} {s.floored:>8}"
            )
        meta = ", ".join(f"{k}={v}" for k, v in self.metadata.items())
        if meta:
            lines.append(f"# {meta}")
        return "\n".join(lines) + "\n"


def compare(models: dict, test: EventLog, delta_hat=None, periods=None, metadata=None) -> EvaluationReport:
    """Score every model on the same test log and rank by logLik (ties by name).

    RMSE is reported when ``delta_hat`` is given.
    """
    if len(models) < 2:
        raise ValueError("compare needs at least two models")
    if len(test) == 0:
        raise InsufficientDataError("cannot score an empty test log")
    if periods is None:
        periods = range(int(test.t[0]), int(test.t[-1]) + 1)
    n_periods = len(np.unique(test.t))
    scores = []
    for name, model in models.items():
        per_event, floored = log_scores(model, test)
        rmse = None if delta_hat is None else rmse_counts(model, delta_hat, test, periods=periods)
        scores.append(
            ModelScore(str(name), float(math.fsum(per_event) / len(per_event)), rmse, len(test),
                       n_periods, floored)
        )
    scores.sort(key=lambda s: (s.loglik, s.name))
    for rank, s in enumerate(scores, 1):
        s.rank = rank
    return EvaluationReport(scores, dict(metadata or {}))
