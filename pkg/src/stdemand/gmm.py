"""Time-varying Gaussian mixture with CAR-smoothed weekly mixture weights.

Component means and covariances are shared across time. Mixture weights
depend only on the position ``b = t mod B`` within the week. Their logit
images ``q[b, r]`` carry a conditional autoregressive prior that links each
week position to the periods one hour and one day before and after it.
Estimation is by Metropolis-within-Gibbs.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.cluster import KMeans

from ._random import substream
from ._validation import ForecasterMixin, check_event_log, check_forecast_periods
from .core import (
    NORMALIZATION_GRID,
    UNBOUNDED,
    DensityModel,
    EventLog,
    SpatialDomain,
    TimeGrid,
    check_covariance,
    gaussian_logpdf,
)
from .exceptions import InsufficientDataError, SimplexBoundaryError

logger = logging.getLogger(__name__)

WEIGHT_CLAMP = 1e-8
PSI_MAX = 0.25


# --------------------------------------------------------------------------
# multinomial logit
# --------------------------------------------------------------------------


def logit_transform(p, clamp=None):
    """Map simplex weights to ``q_r = log(p_r / p_m)``, ``r < m``.

    Works row-wise on ``(..., m)`` arrays. Weights at or below zero raise
    :class:`SimplexBoundaryError` unless ``clamp`` is given, in which case
    they are raised to ``clamp`` and the row renormalized first.
    """
    p = np.asarray(p, dtype=float)
    if clamp is not None:
        p = np.maximum(p, clamp)
        p = p / p.sum(axis=-1, keepdims=True)
    elif np.any(p <= 0):
        raise SimplexBoundaryError("logit transform needs strictly positive weights")
    return np.log(p[..., :-1]) - np.log(p[..., -1:])


def inverse_logit(q):
    """Inverse of :func:`logit_transform`: ``(..., m-1)`` -> ``(..., m)`` simplex rows."""
    q = np.asarray(q, dtype=float)
    full = np.concatenate([q, np.zeros(q.shape[:-1] + (1,))], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------


@dataclass
class MixtureState:
    """Component means ``mu (m, 2)``, covariances ``sigma (m, 2, 2)`` and weekly weights ``P (B, m)``."""

    mu: np.ndarray
    sigma: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1, 2)
        m = len(self.mu)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(m, 2, 2)
        self.P = np.asarray(self.P, dtype=float)
        if self.P.ndim != 2 or self.P.shape[1] != m:
            raise ValueError(f"weight table must have shape (B, {m}), got {self.P.shape}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=1) - 1.0)) > 1e-10:
            raise ValueError("every weight row must be non-negative and sum to one")
        for s in self.sigma:
            check_covariance(s)

    @property
    def m(self) -> int:
        return len(self.mu)

    @property
    def B(self) -> int:
        return len(self.P)

    @property
    def Q(self) -> np.ndarray:
        return logit_transform(self.P, clamp=WEIGHT_CLAMP)

    def to_dict(self):
        return {
            "m": self.m,
            "mu": self.mu.tolist(),
            "sigma": [s.ravel().tolist() for s in self.sigma],
            "P": self.P.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["mu"], np.asarray(data["sigma"]).reshape(-1, 2, 2), data["P"])


@dataclass
class CARParams:
    """Per transformed component ``r``: mean ``a``, persistence ``psi``, conditional variance ``nu2``."""

    a: np.ndarray
    psi: np.ndarray
    nu2: np.ndarray

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.psi = np.atleast_1d(np.asarray(self.psi, dtype=float))
        self.nu2 = np.atleast_1d(np.asarray(self.nu2, dtype=float))
        if not (self.a.shape == self.psi.shape == self.nu2.shape):
            raise ValueError("a, psi and nu2 must have the same length")
        if np.any(self.nu2 <= 0):
            raise ValueError("conditional variances nu2 must be positive")
        if np.any((self.psi < 0) | (self.psi >= PSI_MAX)):
            raise ValueError(f"persistence psi must lie in [0, {PSI_MAX})")

    def to_dict(self):
        return {"a": self.a.tolist(), "psi": self.psi.tolist(), "nu2": self.nu2.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["a"], data["psi"], data["nu2"])


def mixture_density(state: MixtureState, s, t):
    """Mixture density ``sum_j P[t mod B, j] phi(s; mu_j, sigma_j)`` (not truncated to a domain)."""
    pts = np.asarray(s, dtype=float)
    single = pts.shape == (2,)
    pts = pts.reshape(-1, 2)
    row = state.P[int(t) % state.B]
    out = np.zeros(len(pts))
    for j in range(state.m):
        if row[j] > 0:
            out += row[j] * np.exp(gaussian_logpdf(pts, state.mu[j], state.sigma[j]))
    return float(out[0]) if single else out


class MixtureDensity(DensityModel):
    """Weekly-tied Gaussian mixture truncated to the domain."""

    def __init__(self, state: MixtureState, domain: SpatialDomain, periods=range(0, UNBOUNDED)):
        super().__init__(domain, periods)
        self.state = state
        self._component_mass = None

    def period_key(self, t):
        return int(t) % self.state.B

    def component_mass(self):
        """Domain mass of each component (midpoint rule, honoring the mask)."""
        if self._component_mass is None:
            n = NORMALIZATION_GRID
            xs, ys = self.domain.midpoints(n, n)
            gx, gy = np.meshgrid(xs, ys, indexing="ij")
            pts = np.column_stack([gx.ravel(), gy.ravel()])
            inside = self.domain.inside_grid(n, n).ravel()
            area = self.domain.cell_area(n, n)
            self._component_mass = np.array(
                [
                    np.exp(gaussian_logpdf(pts[inside], mu, sig)).sum() * area
                    for mu, sig in zip(self.state.mu, self.state.sigma)
                ]
            )
        return self._component_mass

    def _unnormalized(self, pts, t):
        return mixture_density(self.state, pts, t)

    def _domain_mass(self, t):
        return float(self.state.P[int(t) % self.state.B] @ self.component_mass())

    def metadata(self):
        return {"model": type(self).__name__, "m": self.state.m}


# --------------------------------------------------------------------------
# CAR prior
# --------------------------------------------------------------------------


def car_neighbors(B, d):
    """Indices of the four circular neighbours ``b-1, b+1, b-d, b+d`` of every week position."""
    b = np.arange(B)
    return np.stack([(b - 1) % B, (b + 1) % B, (b - d) % B, (b + d) % B], axis=1)


def car_adjacency(B, d):
    """Circulant neighbour-count matrix ``C``; the joint precision is ``(I - psi C) / nu2``."""
    C = np.zeros((B, B))
    nb = car_neighbors(B, d)
    np.add.at(C, (np.repeat(np.arange(B), 4), nb.ravel()), 1.0)
    return C


def car_conditional_mean(q_series, b, a, psi, d):
    q = np.asarray(q_series, dtype=float)
    nb = car_neighbors(len(q), d)[b]
    return a + psi * np.sum(q[nb] - a)


def car_conditional_logdensity(q_series, b, params, d):
    """Log-density of ``q[b]`` given its four neighbours under one component's CAR prior.

    ``params`` is a :class:`CARParams` of length one or an ``(a, psi, nu2)``
    triple. Neighbour indices wrap around the week.
    """
    if isinstance(params, CARParams):
        if len(params.a) != 1:
            raise ValueError("pass the CAR parameters of a single transformed component")
        a, psi, nu2 = float(params.a[0]), float(params.psi[0]), float(params.nu2[0])
    else:
        a, psi, nu2 = (float(v) for v in params)
    if nu2 <= 0:
        raise ValueError(f"conditional variance must be positive, got {nu2}")
    q = np.asarray(q_series, dtype=float)
    if not 0 <= b < len(q):
        raise IndexError(f"week position {b} outside [0, {len(q)})")
    mean = car_conditional_mean(q, b, a, psi, d)
    return -0.5 * math.log(2 * math.pi * nu2) - 0.5 * (q[b] - mean) ** 2 / nu2


def _color_classes(B, d):
    """Greedy colouring of the CAR graph; positions sharing a colour are conditionally independent."""
    nb = car_neighbors(B, d)
    colors = -np.ones(B, dtype=int)
    for b in range(B):
        used = {colors[j] for j in nb[b] if colors[j] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[b] = c
    return [np.flatnonzero(colors == c) for c in range(colors.max() + 1)]


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


@dataclass
class GmmFitConfig:
    m: int = 5
    n_iter: int = 600
    burn_in: int = 300
    seed: int = 0
    # Normal-Inverse-Wishart prior on (mu_j, sigma_j); mu0 defaults to the data mean.
    kappa0: float = 0.01
    nu0: float = 4.0
    psi0_scale: float = 1.0
    # CAR hyperpriors: a ~ N(0, a_sd^2), nu2 ~ InvGamma(shape, scale), psi ~ U[0, 0.25).
    a_sd: float = 10.0
    nu2_shape: float = 2.0
    nu2_scale: float = 0.5
    q_step: float = 0.25
    psi_step: float = 0.02

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"need at least one component, got m={self.m}")
        if not self.n_iter > self.burn_in >= 0:
            raise ValueError("need n_iter > burn_in >= 0")


@dataclass
class GmmFitResult:
    """Retained posterior draws and the posterior-mean point estimate."""

    state: MixtureState
    car: CARParams
    config: GmmFitConfig
    domain: SpatialDomain
    grid: TimeGrid
    samples: dict = field(default_factory=dict)
    log_posterior: np.ndarray = field(default_factory=lambda: np.empty(0))
    acceptance: dict = field(default_factory=dict)

    @property
    def T_train(self) -> int:
        return self.grid.T


class _Sampler:
    def __init__(self, log: EventLog, config: GmmFitConfig):
        self.cfg = config
        self.rng = substream(config.seed, "mcmc")
        self.pts = log.xy
        self.B, self.d = log.grid.B, log.grid.d
        self.bpos = log.t % self.B
        self.m = config.m
        self.C = car_adjacency(self.B, self.d)
        self.nb = car_neighbors(self.B, self.d)
        self.C_eig = np.linalg.eigvalsh(self.C)
        self.colors = _color_classes(self.B, self.d)
        self.mu0 = self.pts.mean(axis=0)
        self.psi0 = config.psi0_scale * np.eye(2)

    # -- initialization ----------------------------------------------------

    def initialize(self):
        m = self.m
        seed = int(substream(self.cfg.seed, "kmeans").integers(2**31 - 1))
        if m == 1:
            labels = np.zeros(len(self.pts), dtype=int)
        else:
            labels = KMeans(n_clusters=m, n_init=10, random_state=seed).fit(self.pts).labels_
        self.mu = np.array([self.pts[labels == j].mean(axis=0) for j in range(m)])
        resid = self.pts - self.mu[labels]
        pooled = resid.T @ resid / max(len(self.pts) - m, 1)
        pooled = pooled + 1e-6 * np.eye(2)
        self.sigma = np.repeat(pooled[None], m, axis=0)
        self.Q = np.zeros((self.B, m - 1))
        self.a = np.zeros(m - 1)
        self.psi = np.full(m - 1, 0.1)
        self.nu2 = np.full(m - 1, 0.5)
        self.q_step = np.full(m - 1, self.cfg.q_step)
        self.accept = {"q": np.zeros(m - 1), "q_tries": np.zeros(m - 1), "psi": 0, "psi_tries": 0}

    # -- helpers -----------------------------------------------------------

    def P(self):
        return inverse_logit(self.Q)

    def component_logpdf(self):
        return np.column_stack(
            [gaussian_logpdf(self.pts, self.mu[j], self.sigma[j]) for j in range(self.m)]
        )

    def car_quad(self, r, psi=None):
        psi = self.psi[r] if psi is None else psi
        dev = self.Q[:, r] - self.a[r]
        return dev @ dev - psi * dev @ (self.C @ dev)

    def car_logjoint(self, r, psi=None):
        psi = self.psi[r] if psi is None else psi
        logdet = np.sum(np.log1p(-psi * self.C_eig))
        return 0.5 * logdet - 0.5 * self.B * math.log(self.nu2[r]) - 0.5 * self.car_quad(r, psi) / self.nu2[r]

    def log_posterior(self, comp_logpdf, logP):
        mix = np.logaddexp.reduce(logP[self.bpos] + comp_logpdf, axis=1).sum()
        prior = 0.0
        for r in range(self.m - 1):
            prior += self.car_logjoint(r)
            prior += stats.norm.logpdf(self.a[r], 0.0, self.cfg.a_sd)
            prior += stats.invgamma.logpdf(self.nu2[r], self.cfg.nu2_shape, scale=self.cfg.nu2_scale)
        for j in range(self.m):
            prior += stats.invwishart.logpdf(self.sigma[j], df=self.cfg.nu0, scale=self.psi0)
            prior += stats.multivariate_normal.logpdf(
                self.mu[j], self.mu0, self.sigma[j] / self.cfg.kappa0
            )
        return float(mix + prior)

    # -- Gibbs / Metropolis steps -----------------------------------------

    def sample_allocations(self, comp_logpdf, logP):
        logits = logP[self.bpos] + comp_logpdf
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        cum = np.cumsum(prob, axis=1)
        u = self.rng.random(len(prob)) * cum[:, -1]
        z = (u[:, None] > cum).sum(axis=1)
        return np.minimum(z, self.m - 1)

    def sample_components(self, z):
        k0, nu0 = self.cfg.kappa0, self.cfg.nu0
        for j in range(self.m):
            x = self.pts[z == j]
            n = len(x)
            if n:
                xbar = x.mean(axis=0)
                dev = x - xbar
                S = dev.T @ dev
            else:
                xbar, S = self.mu0, np.zeros((2, 2))
            kn, nun = k0 + n, nu0 + n
            mun = (k0 * self.mu0 + n * xbar) / kn
            diff = (xbar - self.mu0)[:, None]
            psin = self.psi0 + S + (k0 * n / kn) * (diff @ diff.T)
            psin = 0.5 * (psin + psin.T)
            sigma = stats.invwishart.rvs(df=nun, scale=psin, random_state=self.rng)
            sigma = 0.5 * (sigma + sigma.T)
            self.sigma[j] = sigma
            self.mu[j] = self.rng.multivariate_normal(mun, sigma / kn)

    def sample_weights(self, counts):
        P = self.P()
        for cls in self.colors:
            for r in range(self.m - 1):
                q_old = self.Q[cls, r]
                q_new = q_old + self.q_step[r] * self.rng.standard_normal(len(cls))
                Qp = self.Q[cls].copy()
                Qp[:, r] = q_new
                Pp = inverse_logit(Qp)
                n_b = counts[cls]
                ll = np.sum(n_b * (np.log(Pp) - np.log(P[cls])), axis=1)
                mean = self.a[r] + self.psi[r] * np.sum(self.Q[self.nb[cls], r] - self.a[r], axis=1)
                lp = -0.5 * ((q_new - mean) ** 2 - (q_old - mean) ** 2) / self.nu2[r]
                acc = np.log(self.rng.random(len(cls))) < ll + lp
                self.Q[cls[acc], r] = q_new[acc]
                P[cls[acc]] = Pp[acc]
                self.accept["q"][r] += acc.sum()
                self.accept["q_tries"][r] += len(cls)

    def sample_car(self):
        B = self.B
        for r in range(self.m - 1):
            # a_r | rest: Gaussian; the CAR precision has constant row sums (1 - 4 psi) / nu2.
            row = (1.0 - 4.0 * self.psi[r]) / self.nu2[r]
            prec = B * row + 1.0 / self.cfg.a_sd**2
            mean = row * self.Q[:, r].sum() / prec
            self.a[r] = mean + self.rng.standard_normal() / math.sqrt(prec)
            # nu2_r | rest: inverse gamma.
            shape = self.cfg.nu2_shape + 0.5 * B
            scale = self.cfg.nu2_scale + 0.5 * self.car_quad(r)
            self.nu2[r] = scale / self.rng.gamma(shape)
            # psi_r | rest: random-walk Metropolis on [0, PSI_MAX).
            prop = self.psi[r] + self.cfg.psi_step * self.rng.standard_normal()
            self.accept["psi_tries"] += 1
            if 0.0 <= prop < PSI_MAX:
                delta = self.car_logjoint(r, prop) - self.car_logjoint(r)
                if math.log(self.rng.random()) < delta:
                    self.psi[r] = prop
                    self.accept["psi"] += 1

    def adapt(self, window_acc, window_tries):
        rate = window_acc / np.maximum(window_tries, 1)
        self.q_step *= np.exp(np.clip(rate - 0.44, -0.5, 0.5))

    # -- driver ------------------------------------------------------------

    def run(self):
        cfg = self.cfg
        self.initialize()
        keep = cfg.n_iter - cfg.burn_in
        B, m = self.B, self.m
        draws = {
            "mu": np.empty((keep, m, 2)),
            "sigma": np.empty((keep, m, 2, 2)),
            "P": np.empty((keep, B, m)),
            "a": np.empty((keep, m - 1)),
            "psi": np.empty((keep, m - 1)),
            "nu2": np.empty((keep, m - 1)),
        }
        trace = np.empty(cfg.n_iter)
        last_acc = self.accept["q"].copy()
        last_tries = self.accept["q_tries"].copy()
        for it in range(cfg.n_iter):
            comp = self.component_logpdf()
            logP = np.log(self.P())
            trace[it] = self.log_posterior(comp, logP)
            z = self.sample_allocations(comp, logP)
            self.sample_components(z)
            if m > 1:
                counts = np.bincount(self.bpos * m + z, minlength=B * m).reshape(B, m)
                self.sample_weights(counts)
                self.sample_car()
                if it < cfg.burn_in and (it + 1) % 25 == 0:
                    self.adapt(self.accept["q"] - last_acc, self.accept["q_tries"] - last_tries)
                    last_acc = self.accept["q"].copy()
                    last_tries = self.accept["q_tries"].copy()
            k = it - cfg.burn_in
            if k >= 0:
                draws["mu"][k] = self.mu
                draws["sigma"][k] = self.sigma
                draws["P"][k] = self.P()
                draws["a"][k] = self.a
                draws["psi"][k] = self.psi
                draws["nu2"][k] = self.nu2
        return draws, trace


def fit(log: EventLog, config: GmmFitConfig | None = None) -> GmmFitResult:
    """Fit the time-varying mixture by MCMC and return posterior draws and means.

    The point estimate averages draws under the fixed labelling set by the
    k-means initialization; weight rows are averaged on the simplex.
    """
    config = GmmFitConfig() if config is None else config
    if len(log) < config.m:
        raise InsufficientDataError(
            f"{len(log)} events cannot support a {config.m}-component mixture"
        )
    if log.grid.T < log.grid.B:
        warnings.warn(
            f"training log covers {log.grid.T} periods, less than one week ({log.grid.B})",
            stacklevel=2,
        )
    sampler = _Sampler(log, config)
    draws, trace = sampler.run()
    P = draws["P"].mean(axis=0)
    P /= P.sum(axis=1, keepdims=True)
    sigma = draws["sigma"].mean(axis=0)
    sigma = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))
    state = MixtureState(draws["mu"].mean(axis=0), sigma, P)
    car = CARParams(draws["a"].mean(axis=0), draws["psi"].mean(axis=0), draws["nu2"].mean(axis=0))
    acc = sampler.accept
    acceptance = {
        "q": (acc["q"] / np.maximum(acc["q_tries"], 1)).tolist(),
        "psi": acc["psi"] / max(acc["psi_tries"], 1),
    }
    logger.debug("gmm acceptance rates: %s", acceptance)
    return GmmFitResult(state, car, config, log.domain, log.grid, draws, trace, acceptance)


def predict(result: GmmFitResult, t_future) -> MixtureDensity:
    """Predictive density for the requested future period(s) from the point estimate."""
    periods = check_forecast_periods(t_future, result.T_train)
    return MixtureDensity(result.state, result.domain, periods)


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------


class TimeVaryingGMM(ForecasterMixin, BaseEstimator):
    """Gaussian mixture with shared components and weekly, CAR-smoothed weights.

    Parameters
    ----------
    n_components : int, default=5
    n_iter, burn_in : int
        MCMC length and the number of initial draws discarded.
    random_state : int, default=0
    kappa0, nu0, psi0_scale : float
        Normal-Inverse-Wishart prior strength for the components.
    a_sd, nu2_shape, nu2_scale : float
        Hyperpriors of the CAR means and conditional variances.
    q_step, psi_step : float
        Initial random-walk scales for the weight and persistence updates.

    Attributes
    ----------
    means_, covariances_, weights_ : ndarray
        Posterior means; ``weights_`` has one row per week position.
    car_params_ : CARParams
    result_ : GmmFitResult
    """

    method = "gmm"

    def __init__(
        self,
        n_components=5,
        n_iter=600,
        burn_in=300,
        random_state=0,
        kappa0=0.01,
        nu0=4.0,
        psi0_scale=1.0,
        a_sd=10.0,
        nu2_shape=2.0,
        nu2_scale=0.5,
        q_step=0.25,
        psi_step=0.02,
    ):
        self.n_components = n_components
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.random_state = random_state
        self.kappa0 = kappa0
        self.nu0 = nu0
        self.psi0_scale = psi0_scale
        self.a_sd = a_sd
        self.nu2_shape = nu2_shape
        self.nu2_scale = nu2_scale
        self.q_step = q_step
        self.psi_step = psi_step

    def _config(self):
        return GmmFitConfig(
            m=self.n_components,
            n_iter=self.n_iter,
            burn_in=self.burn_in,
            seed=self.random_state,
            kappa0=self.kappa0,
            nu0=self.nu0,
            psi0_scale=self.psi0_scale,
            a_sd=self.a_sd,
            nu2_shape=self.nu2_shape,
            nu2_scale=self.nu2_scale,
            q_step=self.q_step,
            psi_step=self.psi_step,
        )

    def fit(self, X, y=None):
        log = check_event_log(X)
        self._set_result(fit(log, self._config()))
        return self

    def _set_result(self, result):
        self.result_ = result
        self.means_ = result.state.mu
        self.covariances_ = result.state.sigma
        self.weights_ = result.state.P
        self.car_params_ = result.car
        self.domain_ = result.domain
        self.grid_ = result.grid
        return self

    def _predict(self, periods):
        return predict(self.result_, periods)

    def to_dict(self):
        r = self.result_
        return {
            "method": self.method,
            "params": self.get_params(),
            "seed": self.random_state,
            "domain": r.domain.to_dict(),
            "grid": r.grid.to_dict(),
            **r.state.to_dict(),
            "car": r.car.to_dict(),
            "config": asdict(r.config),
            "acceptance": r.acceptance,
        }

    @classmethod
    def from_dict(cls, data):
        est = cls(**data["params"])
        result = GmmFitResult(
            MixtureState.from_dict(data),
            CARParams.from_dict(data["car"]),
            GmmFitConfig(**data["config"]),
            SpatialDomain.from_dict(data["domain"]),
            TimeGrid.from_dict(data["grid"]),
            acceptance=data.get("acceptance", {}),
        )
        return est._set_result(result)
