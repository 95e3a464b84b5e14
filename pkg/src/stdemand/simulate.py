"""Synthetic ground truth: nonhomogeneous Poisson event streams with known densities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._random import substream
from .core import EventLog, SpatialDomain, TimeGrid
from .gmm import MixtureDensity, MixtureState, inverse_logit

SCENARIOS = ("static-3comp", "weekly-5comp", "daily-downtown", "bay-cshape")

#: C-shaped city wrapped around a bay that opens to the east.
BAY_MASK = np.array(
    [(2, 2), (23, 2), (23, 8), (9, 8), (9, 17), (23, 17), (23, 23), (2, 23)], dtype=float
)


@dataclass
class GroundTruth:
    """Per-period call volume ``delta`` and the true spatial density."""

    delta: np.ndarray
    density: MixtureDensity
    grid: TimeGrid
    name: str = "custom"
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        if self.delta.shape != (self.grid.T,):
            raise ValueError(f"delta must have one entry per period ({self.grid.T})")
        if np.any(self.delta < 0):
            raise ValueError("aggregate intensities must be non-negative")

    @property
    def domain(self) -> SpatialDomain:
        return self.density.domain

    def to_dict(self):
        return {
            "scenario": self.name,
            "seed": self.seed,
            "grid": self.grid.to_dict(),
            "domain": self.domain.to_dict(),
            "delta": self.delta.tolist(),
            "density": self.density.state.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data):
        grid = TimeGrid.from_dict(data["grid"])
        domain = SpatialDomain.from_dict(data["domain"])
        density = MixtureDensity(MixtureState.from_dict(data["density"]), domain)
        return cls(data["delta"], density, grid, data.get("scenario", "custom"), data.get("seed"),
                   data.get("meta", {}))


def sample_log(truth: GroundTruth, seed) -> EventLog:
    """Draw an event log: ``n_t ~ Poisson(delta_t)``, then i.i.d. locations from ``f_t``.

    Locations come from a component draw followed by a Gaussian draw; draws
    that fall outside the domain are redrawn (component included) until they
    land inside, which samples the mixture truncated to the domain exactly.
    """
    rng = substream(seed, "simulate")
    state = truth.density.state
    domain = truth.domain
    counts = rng.poisson(truth.delta)
    t = np.repeat(np.arange(truth.grid.T, dtype=np.int64), counts)
    if len(t) == 0:
        return EventLog(t, np.empty((0, 2)), truth.grid, domain)
    rows = state.P[t % state.B]
    chol = np.linalg.cholesky(state.sigma)
    xy = np.empty((len(t), 2))
    todo = np.arange(len(t))
    while len(todo):
        cum = np.cumsum(rows[todo], axis=1)
        u = rng.random(len(todo)) * cum[:, -1]
        comp = np.minimum((u[:, None] > cum).sum(axis=1), state.m - 1)
        z = rng.standard_normal((len(todo), 2))
        xy[todo] = state.mu[comp] + np.einsum("nij,nj->ni", chol[comp], z)
        todo = todo[~domain.contains(xy[todo])]
    return EventLog(t, xy, truth.grid, domain)


def _daily_volume(T, mean=30.0, amplitude=8.0, peak_hour=14):
    hour = np.arange(T) % 24
    return mean + amplitude * np.cos(2 * math.pi * (hour - peak_hour) / 24)


def _seasonal_logits(B, daily, weekly, rng):
    """Logit series ``daily_j cos(2 pi (b - phi_j)/24) + weekly_j cos(2 pi (b - theta_j)/168)``."""
    b = np.arange(B)[:, None]
    phi = rng.uniform(0, 24, size=len(daily))
    theta = rng.uniform(0, 168, size=len(weekly))
    return np.asarray(daily) * np.cos(2 * math.pi * (b - phi) / 24) + np.asarray(weekly) * np.cos(
        2 * math.pi * (b - theta) / 168
    )


def _rot(sx, sy, angle):
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return R @ np.diag([sx * sx, sy * sy]) @ R.T


def make_scenario(name, weeks, seed=0) -> GroundTruth:
    """Synthetic city with time-varying mixture weights.

    ``static-3comp`` has constant weights, ``weekly-5comp`` weights that
    repeat every week, and ``daily-downtown`` a downtown component with much
    stronger daily seasonality than the rest. ``bay-cshape`` places demand on
    a C-shaped domain around a bay, for the kernel-warping estimator. The
    seed jitters component means and seasonal phases.
    """
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    weeks = int(weeks)
    if weeks < 1:
        raise ValueError(f"a scenario needs at least one week, got {weeks}")
    rng = substream(seed, f"scenario/{name}")
    grid = TimeGrid(weeks * 168)
    B = grid.B
    T = grid.T
    meta = {"weeks": weeks}

    if name == "static-3comp":
        domain = SpatialDomain((0.0, 20.0, 0.0, 25.0))
        mu = np.array([(5.0, 6.0), (14.0, 8.0), (10.0, 18.0)])
        sigma = np.array([_rot(1.5, 1.0, 0.4), _rot(1.2, 1.2, 0.0), _rot(2.0, 1.3, -0.6)])
        P = np.tile([0.5, 0.3, 0.2], (B, 1))
        delta = np.full(T, 30.0)
    elif name == "weekly-5comp":
        domain = SpatialDomain((0.0, 20.0, 0.0, 25.0))
        mu = np.array([(4.5, 5.0), (15.0, 5.5), (10.0, 12.5), (5.0, 20.0), (15.0, 19.5)])
        sigma = np.array(
            [_rot(1.4, 1.0, 0.3), _rot(1.6, 1.1, -0.5), _rot(1.2, 1.2, 0.0),
             _rot(1.8, 1.0, 0.9), _rot(1.3, 1.0, -0.2)]
        )
        logits = _seasonal_logits(B, [1.2, 0.4, 1.0, 0.3, 0.8], [0.6, 1.2, 0.3, 1.0, 0.6], rng)
        P = inverse_logit(logits[:, :-1] - logits[:, -1:])
        delta = _daily_volume(T)
    elif name == "daily-downtown":
        domain = SpatialDomain((0.0, 20.0, 0.0, 25.0))
        mu = np.array([(10.0, 12.5), (4.5, 5.0), (15.5, 6.0), (6.0, 20.0)])
        sigma = np.array([_rot(1.0, 1.0, 0.0), _rot(1.6, 1.2, 0.3), _rot(1.5, 1.2, -0.4),
                          _rot(1.8, 1.3, 0.7)])
        logits = _seasonal_logits(B, [1.5, 0.1, 0.1, 0.1], [0.2, 0.8, 0.6, 0.7], rng)
        P = inverse_logit(logits[:, :-1] - logits[:, -1:])
        delta = _daily_volume(T)
    else:
        domain = SpatialDomain((0.0, 25.0, 0.0, 25.0), BAY_MASK)
        mu = np.array([(6.0, 5.0), (17.0, 4.8), (5.0, 12.5), (6.0, 20.0), (17.0, 20.2)])
        sigma = np.array(
            [_rot(1.8, 1.0, 0.0), _rot(2.2, 1.0, 0.0), _rot(1.0, 2.2, 0.0),
             _rot(1.8, 1.0, 0.0), _rot(2.2, 1.0, 0.0)]
        )
        logits = _seasonal_logits(B, [1.5, 1.5, 1.2, 1.5, 1.5], [1.2, 1.2, 1.0, 1.2, 1.2], rng)
        P = inverse_logit(logits[:, :-1] - logits[:, -1:])
        delta = _daily_volume(T, mean=25.0, amplitude=6.0)
        meta["mask"] = "C-shaped bay opening east"

    mu = mu + rng.uniform(-0.3, 0.3, size=mu.shape)
    density = MixtureDensity(MixtureState(mu, sigma, P), domain)
    return GroundTruth(delta, density, grid, name, seed, meta)
