"""Kernel warping: a sparse labeled KDE whose kernels are deformed by a point-cloud graph.

The point cloud is a random sample of recent events. Its symmetrized
k-nearest-neighbour graph Laplacian ``L`` deforms the Gaussian base kernel

    k~(x, s) = k(x, s) - k_x^T (I + lam L K)^-1 lam L k_s

so similarity follows the geography traced out by the cloud. The labeled
data are the events at the same week position in recent weeks.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.linalg import lapack
from sklearn.base import BaseEstimator

from ._random import substream
from ._validation import ForecasterMixin, check_bandwidth, check_event_log, check_forecast_periods
from .core import (
    NORMALIZATION_GRID,
    UNBOUNDED,
    DensityModel,
    EventLog,
    SpatialDomain,
    TimeGrid,
    gaussian_kernel,
    gaussian_sum_grid,
    silverman_bandwidth,
    split_log,
    trailing_window,
)
from .exceptions import CrossValidationError, InsufficientDataError, SingularSystemError

logger = logging.getLogger(__name__)

RCOND_MIN = 1e-12


@dataclass(eq=False)
class PointCloud:
    """Cloud nodes ``z``, 0/1 adjacency ``A``, Laplacian ``L = D - A`` and Gram matrix ``K``."""

    z: np.ndarray
    A: np.ndarray
    h: float
    L: np.ndarray = field(init=False)
    K: np.ndarray = field(init=False)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).reshape(-1, 2)
        self.A = np.asarray(self.A, dtype=np.int64)
        n = len(self.z)
        if self.A.shape != (n, n):
            raise ValueError(f"adjacency must be {n}x{n}")
        if not np.array_equal(self.A, self.A.T) or np.any(np.diag(self.A)):
            raise ValueError("adjacency must be symmetric with a zero diagonal")
        self.h = check_bandwidth(self.h)
        self.L = np.diag(self.A.sum(axis=1)) - self.A
        self.K = gaussian_kernel(self.z, self.z, self.h)

    @property
    def n(self):
        return len(self.z)

    def edges(self):
        i, j = np.nonzero(np.triu(self.A))
        return np.column_stack([i, j])

    def with_bandwidth(self, h):
        return PointCloud(self.z, self.A, h)

    def to_dict(self):
        return {"z": self.z.tolist(), "edges": self.edges().tolist(), "h": self.h}

    @classmethod
    def from_dict(cls, data):
        z = np.asarray(data["z"], dtype=float).reshape(-1, 2)
        A = np.zeros((len(z), len(z)), dtype=np.int64)
        e = np.asarray(data["edges"], dtype=np.int64).reshape(-1, 2)
        A[e[:, 0], e[:, 1]] = 1
        A[e[:, 1], e[:, 0]] = 1
        return cls(z, A, data["h"])


def knn_adjacency(z, k) -> np.ndarray:
    """Symmetrized (union) k-nearest-neighbour adjacency; distance ties go to the lower index."""
    z = np.asarray(z, dtype=float).reshape(-1, 2)
    n = len(z)
    A = np.zeros((n, n), dtype=np.int64)
    if n < 2:
        return A
    k = min(int(k), n - 1)
    d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    nbrs = np.argsort(d2, axis=1, kind="stable")[:, :k]
    A[np.repeat(np.arange(n), k), nbrs.ravel()] = 1
    return np.maximum(A, A.T)


def build_cloud(log: EventLog, n=1000, weeks_back=8, k_neighbors=5, seed=0, bandwidth=None) -> PointCloud:
    """Sample ``n`` recent events without replacement and assemble the cloud graph.

    ``bandwidth`` defaults to the Silverman rule on the sampling window.
    """
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be at least 1")
    window = trailing_window(log, weeks_back)
    if len(window) < n:
        raise InsufficientDataError(
            f"point cloud needs {n} events but the {weeks_back}-week window holds {len(window)}"
        )
    rng = substream(seed, "cloud")
    idx = np.sort(rng.choice(len(window), size=n, replace=False))
    z = window.xy[idx]
    if bandwidth is None:
        bandwidth = silverman_bandwidth(window.xy)
    return PointCloud(z, knn_adjacency(z, k_neighbors), bandwidth)


class WarpSystem:
    """One LU factorization of ``I + lam L K``, shared by every warped-kernel evaluation."""

    def __init__(self, cloud: PointCloud, lam):
        lam = float(lam)
        if lam < 0 or not math.isfinite(lam):
            raise ValueError(f"deformation strength must be non-negative, got {lam}")
        self.cloud = cloud
        self.lam = lam
        self.lamL = lam * cloud.L.astype(float)
        M = np.eye(cloud.n) + self.lamL @ cloud.K
        anorm = np.abs(M).sum(axis=0).max()
        with np.errstate(all="ignore"):
            self._lu = scipy.linalg.lu_factor(M, check_finite=False)
        if not np.all(np.isfinite(self._lu[0])):
            raise SingularSystemError(lam)
        rcond, info = lapack.dgecon(self._lu[0], anorm, norm="1")
        if info != 0 or rcond < RCOND_MIN:
            raise SingularSystemError(lam, 1.0 / rcond if rcond > 0 else math.inf)
        self.rcond = float(rcond)

    @property
    def h(self):
        return self.cloud.h

    def solve_transposed(self, rhs):
        """``(I + lam L K)^-T rhs``."""
        return scipy.linalg.lu_solve(self._lu, rhs, trans=1, check_finite=False)

    def cloud_kernel(self, pts):
        return gaussian_kernel(pts, self.cloud.z, self.h)


def warped_kernel(x, s, system: WarpSystem):
    """Deformed kernel ``k~(x, s)``; ``x`` and ``s`` may be single points or ``(n, 2)`` arrays.

    Returns a float for two single points, otherwise the ``(len(x), len(s))`` matrix.
    """
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    single = x.shape == (2,) and s.shape == (2,)
    x = x.reshape(-1, 2)
    s = s.reshape(-1, 2)
    base = gaussian_kernel(x, s, system.h)
    if system.lam == 0.0:
        out = base
    else:
        u = system.solve_transposed(system.cloud_kernel(x).T)  # (N, nx)
        out = base - u.T @ (system.lamL @ system.cloud_kernel(s).T)
    return float(out[0, 0]) if single else out


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


class WarpDensity(DensityModel):
    """``max(0, mean_x k~(x, s))`` over the labeled set of each week position, renormalized.

    The labeled sum factorizes as ``sum_x k(x, s) - g^T k_s`` with
    ``g = lam L (I + lam L K)^-T sum_x k_x``, so each week position needs one
    solve and evaluation costs one kernel row against the cloud.
    """

    def __init__(self, system: WarpSystem, history: EventLog, periods=range(0, UNBOUNDED),
                 norm_grid=NORMALIZATION_GRID):
        super().__init__(history.domain, periods)
        self.system = system
        self.history = history
        self.norm_grid = norm_grid
        self.B = history.grid.B
        self._labeled = {}

    def period_key(self, t):
        return int(t) % self.B

    def labeled(self, t):
        """``(points, g)`` for the week position of ``t``."""
        b = self.period_key(t)
        hit = self._labeled.get(b)
        if hit is None:
            pts = self.history.xy[self.history.t % self.B == b]
            if len(pts) == 0:
                logger.warning(
                    "no labeled events at week position %d; falling back to an unwarped cloud KDE", b
                )
                hit = (self.system.cloud.z, np.zeros(self.system.cloud.n))
            elif self.system.lam == 0.0:
                hit = (pts, np.zeros(self.system.cloud.n))
            else:
                kappa = self.system.cloud_kernel(pts).sum(axis=0)
                g = self.system.lamL @ self.system.solve_transposed(kappa)
                hit = (pts, g)
            self._labeled[b] = hit
        return hit

    def raw(self, pts, t):
        """Mean warped kernel over the labeled set, before clipping and normalization."""
        x, g = self.labeled(t)
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        out = gaussian_kernel(pts, x, self.system.h).sum(axis=1)
        if np.any(g):
            out = out - self.system.cloud_kernel(pts) @ g
        return out / len(x)

    def _unnormalized(self, pts, t):
        return np.maximum(self.raw(pts, t), 0.0)

    def _unnormalized_grid(self, xs, ys, t):
        x, g = self.labeled(t)
        h = self.system.h
        vals = gaussian_sum_grid(x, np.ones(len(x)), h, xs, ys)
        if np.any(g):
            vals = vals - gaussian_sum_grid(self.system.cloud.z, g, h, xs, ys)
        return np.maximum(vals / len(x), 0.0)

    def _domain_mass(self, t):
        n = self.norm_grid
        xs, ys = self.domain.midpoints(n, n)
        vals = self._unnormalized_grid(xs, ys, t)
        return float(np.sum(vals[self.domain.inside_grid(n, n)]) * self.domain.cell_area(n, n))

    def metadata(self):
        return {"model": type(self).__name__, "lambda": self.system.lam, "bandwidth": self.system.h,
                "n_cloud": self.system.cloud.n}


@dataclass
class WarpModel:
    system: WarpSystem
    history: EventLog

    def __post_init__(self):
        if len(self.history) == 0:
            raise InsufficientDataError("kernel warping needs labeled history")


def predict(model: WarpModel, t_future, norm_grid=NORMALIZATION_GRID) -> WarpDensity:
    periods = check_forecast_periods(t_future, model.history.grid.T)
    return WarpDensity(model.system, model.history, periods, norm_grid)


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------


@dataclass
class CVResult:
    lam: float
    h: float
    score: float
    scores: dict  # (lam, h) -> mean held-out NLL over folds
    fold_scores: dict  # (lam, h) -> per-fold NLL
    splits: list  # (T_train, T_valid_end) per fold
    failures: dict

    def __iter__(self):
        return iter((self.lam, self.h))


def rolling_origin_splits(T, B, folds):
    """Fold ``i`` trains on all weeks before validation week ``W - folds + i`` and validates on it."""
    W = T // B
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if W - folds < 1:
        raise InsufficientDataError(f"{W} whole weeks cannot support {folds} folds plus training")
    return [((W - folds + i) * B, (W - folds + i + 1) * B) for i in range(folds)]


def cross_validate(log: EventLog, lambda_grid, h_grid, folds=2, seed=0, n_cloud=1000,
                   weeks_back=8, k_neighbors=5, norm_grid=NORMALIZATION_GRID) -> CVResult:
    """Choose ``(lam, h)`` by mean held-out negative log-likelihood over rolling-origin folds.

    Ties go to the smaller ``lam``, then the smaller ``h``. Candidates whose
    system is singular are skipped and reported in ``failures``.
    """
    from .evaluation import mean_neg_log_lik

    lambda_grid = sorted(float(v) for v in lambda_grid)
    h_grid = sorted(float(v) for v in h_grid)
    if not lambda_grid or not h_grid:
        raise ValueError("lambda and bandwidth grids must be non-empty")
    log = check_event_log(log)
    splits = rolling_origin_splits(log.grid.T, log.grid.B, folds)
    fold_scores = {pair: [] for pair in itertools.product(lambda_grid, h_grid)}
    failures = {}
    for T_train, T_end in splits:
        train, rest = split_log(log, T_train)
        valid = rest.window(T_train, T_end)
        base = build_cloud(train, min(n_cloud, len(trailing_window(train, weeks_back))),
                           weeks_back, k_neighbors, seed, bandwidth=h_grid[0])
        history = trailing_window(train, weeks_back)
        for h in h_grid:
            cloud = base.with_bandwidth(h)
            for lam in lambda_grid:
                pair = (lam, h)
                if pair in failures:
                    continue
                try:
                    system = WarpSystem(cloud, lam)
                except SingularSystemError as err:
                    failures[pair] = str(err)
                    continue
                model = WarpDensity(system, history, range(T_train, T_end), norm_grid)
                fold_scores[pair].append(mean_neg_log_lik(model, valid))
    scores = {
        pair: float(np.mean(v)) for pair, v in fold_scores.items()
        if pair not in failures and len(v) == len(splits)
    }
    if not scores:
        raise CrossValidationError(failures)
    best = None
    for pair in itertools.product(lambda_grid, h_grid):
        if pair in scores and (best is None or scores[pair] < scores[best]):
            best = pair
    return CVResult(best[0], best[1], scores[best], scores,
                    {k: v for k, v in fold_scores.items() if k in scores}, splits, failures)


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------


class KernelWarpingKDE(ForecasterMixin, BaseEstimator):
    """Labeled-data KDE with kernels warped toward a point-cloud graph Laplacian.

    Parameters
    ----------
    deformation : float, default=1.0
        Warping strength ``lam``; 0 recovers the plain labeled KDE.
    bandwidth : float or None
        Shared bandwidth of the base kernel and Gram matrix; ``None`` uses the
        Silverman rule on the cloud window.
    n_cloud, weeks_back, n_neighbors : int
        Cloud size, history window in weeks and neighbours per node.
    random_state : int, default=0
        Seeds the cloud subsample.
    lambda_grid, bandwidth_grid : sequence of float or None
        When given, ``fit`` picks ``(lam, h)`` from these grids by
        rolling-origin cross-validation; a missing grid falls back to the
        single value of ``deformation`` or the (possibly Silverman) ``bandwidth``.
    cv_folds : int, default=2
    """

    method = "warp"

    def __init__(self, deformation=1.0, bandwidth=None, n_cloud=1000, weeks_back=8, n_neighbors=5,
                 random_state=0, lambda_grid=None, bandwidth_grid=None, cv_folds=2):
        self.deformation = deformation
        self.bandwidth = bandwidth
        self.n_cloud = n_cloud
        self.weeks_back = weeks_back
        self.n_neighbors = n_neighbors
        self.random_state = random_state
        self.lambda_grid = lambda_grid
        self.bandwidth_grid = bandwidth_grid
        self.cv_folds = cv_folds

    def fit(self, X, y=None):
        log = check_event_log(X)
        history = trailing_window(log, self.weeks_back)
        lam, h = self.deformation, self.bandwidth
        self.cv_ = None
        if self.lambda_grid is not None or self.bandwidth_grid is not None:
            lams = [lam] if self.lambda_grid is None else list(self.lambda_grid)
            if self.bandwidth_grid is not None:
                hs = list(self.bandwidth_grid)
            else:
                hs = [h if h is not None else silverman_bandwidth(history.xy)]
            self.cv_ = cross_validate(log, lams, hs, self.cv_folds, self.random_state, self.n_cloud,
                                      self.weeks_back, self.n_neighbors)
            lam, h = self.cv_.lam, self.cv_.h
        cloud = build_cloud(log, self.n_cloud, self.weeks_back, self.n_neighbors,
                            self.random_state, h)
        return self._set_state(cloud, history, lam)

    def _set_state(self, cloud, history, lam):
        self.cloud_ = cloud
        self.bandwidth_ = cloud.h
        self.deformation_ = float(lam)
        self.system_ = WarpSystem(cloud, lam)
        self.model_ = WarpModel(self.system_, history)
        return self

    def _predict(self, periods):
        return predict(self.model_, periods)

    def to_dict(self):
        hist = self.model_.history
        params = self.get_params()
        for key in ("lambda_grid", "bandwidth_grid"):
            if params[key] is not None:
                params[key] = [float(v) for v in params[key]]
        return {
            "method": self.method,
            "params": params,
            "lambda": self.deformation_,
            "domain": hist.domain.to_dict(),
            "grid": hist.grid.to_dict(),
            "cloud": self.cloud_.to_dict(),
            "history": {"t": hist.t.tolist(), "xy": hist.xy.tolist()},
        }

    @classmethod
    def from_dict(cls, data):
        est = cls(**data["params"])
        domain = SpatialDomain.from_dict(data["domain"])
        grid = TimeGrid.from_dict(data["grid"])
        history = EventLog(data["history"]["t"], data["history"]["xy"], grid, domain,
                           check_domain=False)
        est.cv_ = None
        return est._set_state(PointCloud.from_dict(data["cloud"]), history, data["lambda"])
