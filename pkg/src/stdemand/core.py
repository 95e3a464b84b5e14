"""Domain types shared by every estimator.

Events live on an hourly time grid (period index ``t``, 0-based) and in a
planar spatial domain measured in km. A :class:`DensityModel` evaluates a
predictive spatial density that integrates to one over the domain.
"""

from __future__ import annotations

import abc
import csv
import datetime as dt
import functools
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import shapely
from scipy.special import ndtr

from .exceptions import InvalidCovarianceError, PeriodOutOfRangeError

#: Period index 0 of CSV timestamps. 2024-01-01 is a Monday.
DEFAULT_ORIGIN = dt.datetime(2024, 1, 1)
#: Resolution of the midpoint grid used for numeric normalization.
NORMALIZATION_GRID = 200
UNBOUNDED = sys.maxsize

_TWO_PI = 2.0 * math.pi
_CHUNK = 4096


# --------------------------------------------------------------------------
# time and space
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Hourly discretization with ``d`` periods per day and weekly cycle ``B = 7 d``."""

    T: int
    d: int = 24
    period_hours: float = 1.0

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError(f"periods per day must be positive, got {self.d}")
        if self.T < 1:
            raise ValueError(f"time grid needs at least one period, got T={self.T}")
        if self.period_hours != 1.0:
            raise ValueError("only hourly periods are supported")

    @property
    def B(self) -> int:
        return 7 * self.d

    def week_position(self, t):
        return np.asarray(t) % self.B

    def to_dict(self):
        return {"T": self.T, "d": self.d, "period_hours": self.period_hours}

    @classmethod
    def from_dict(cls, data):
        return cls(T=int(data["T"]), d=int(data.get("d", 24)))


@dataclass(frozen=True, eq=False)
class SpatialDomain:
    """Axis-aligned bounding box in km, optionally restricted by a polygon mask.

    Parameters
    ----------
    bbox : tuple
        ``(xmin, xmax, ymin, ymax)``.
    mask : array-like of shape (k, 2), optional
        Polygon vertices describing the admissible region inside ``bbox``.
    """

    bbox: tuple
    mask: np.ndarray | None = None
    _polygon: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        bbox = tuple(float(v) for v in self.bbox)
        if len(bbox) != 4:
            raise ValueError("bbox must be (xmin, xmax, ymin, ymax)")
        xmin, xmax, ymin, ymax = bbox
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"bbox must have positive area, got {bbox}")
        object.__setattr__(self, "bbox", bbox)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=float)
            if mask.ndim != 2 or mask.shape[1] != 2 or len(mask) < 3:
                raise ValueError("mask must be an array of at least 3 (x, y) vertices")
            polygon = shapely.Polygon(mask)
            if not polygon.is_valid or polygon.area <= 0:
                raise ValueError("mask polygon is invalid or has zero area")
            if not shapely.box(xmin, ymin, xmax, ymax).covers(polygon):
                raise ValueError("mask polygon must lie inside the bounding box")
            shapely.prepare(polygon)
            object.__setattr__(self, "mask", mask)
            object.__setattr__(self, "_polygon", polygon)

    @property
    def width(self) -> float:
        return self.bbox[1] - self.bbox[0]

    @property
    def height(self) -> float:
        return self.bbox[3] - self.bbox[2]

    @property
    def area(self) -> float:
        """Area of the admissible region (the mask if present, else the bbox)."""
        if self._polygon is not None:
            return float(self._polygon.area)
        return self.width * self.height

    def contains(self, s) -> np.ndarray:
        pts, _ = as_points(s)
        xmin, xmax, ymin, ymax = self.bbox
        inside = (
            (pts[:, 0] >= xmin) & (pts[:, 0] <= xmax) & (pts[:, 1] >= ymin) & (pts[:, 1] <= ymax)
        )
        if self._polygon is not None and inside.any():
            inside[inside] = shapely.intersects_xy(self._polygon, pts[inside, 0], pts[inside, 1])
        return inside

    def midpoints(self, nx, ny):
        """Cell-center coordinates of an ``nx`` by ``ny`` tiling of the bbox."""
        xmin, xmax, ymin, ymax = self.bbox
        xs = xmin + (np.arange(nx) + 0.5) * (self.width / nx)
        ys = ymin + (np.arange(ny) + 0.5) * (self.height / ny)
        return xs, ys

    def cell_area(self, nx, ny) -> float:
        return (self.width / nx) * (self.height / ny)

    @functools.lru_cache(maxsize=8)
    def inside_grid(self, nx, ny) -> np.ndarray:
        """Boolean ``(nx, ny)`` array: which cell centers lie in the domain."""
        if self._polygon is None:
            return np.ones((nx, ny), dtype=bool)
        xs, ys = self.midpoints(nx, ny)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return shapely.intersects_xy(self._polygon, gx, gy)

    def to_dict(self):
        out = {"bbox": list(self.bbox)}
        if self.mask is not None:
            out["mask"] = self.mask.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["bbox"]), data.get("mask"))


def infer_domain(xy) -> SpatialDomain:
    """Smallest integer-km bounding box covering the points."""
    xy = np.asarray(xy, dtype=float)
    if len(xy) == 0:
        raise ValueError("cannot infer a domain from zero points")
    lo = np.floor(xy.min(axis=0))
    hi = np.ceil(xy.max(axis=0))
    hi = np.maximum(hi, lo + 1.0)
    return SpatialDomain((lo[0], hi[0], lo[1], hi[1]))


# --------------------------------------------------------------------------
# events
# --------------------------------------------------------------------------


class Event(NamedTuple):
    t: int
    x: float
    y: float

    @property
    def s(self):
        return (self.x, self.y)


class EventLog:
    """Timestamped planar events, sorted by period.

    Stored column-wise: ``t`` is an int64 array of period indices and ``xy``
    an ``(n, 2)`` array of coordinates. Input is stably sorted by ``t``.
    """

    def __init__(self, t, xy, grid: TimeGrid, domain: SpatialDomain, *, check_domain=True):
        t = np.array(t, dtype=np.int64).reshape(-1)
        xy = np.array(xy, dtype=float).reshape(-1, 2)
        if len(t) != len(xy):
            raise ValueError(f"{len(t)} periods but {len(xy)} locations")
        if len(t) and (t.min() < 0 or t.max() >= grid.T):
            raise ValueError(f"event periods must lie in [0, {grid.T})")
        if check_domain and len(t):
            outside = ~domain.contains(xy)
            if outside.any():
                raise ValueError(f"{int(outside.sum())} events lie outside the spatial domain")
        if len(t) and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            t, xy = t[order], xy[order]
        t.setflags(write=False)
        xy.setflags(write=False)
        self.t = t
        self.xy = xy
        self.grid = grid
        self.domain = domain

    @classmethod
    def from_events(cls, events, grid, domain):
        events = list(events)
        t = [e.t for e in events]
        xy = np.array([(e.x, e.y) for e in events], dtype=float).reshape(-1, 2)
        return cls(t, xy, grid, domain)

    def __len__(self):
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for t, (x, y) in zip(self.t.tolist(), self.xy.tolist()):
            yield Event(t, x, y)

    def __repr__(self):
        return f"EventLog(n={len(self)}, T={self.grid.T}, bbox={self.domain.bbox})"

    def __eq__(self, other):
        if not isinstance(other, EventLog):
            return NotImplemented
        return (
            np.array_equal(self.t, other.t)
            and np.array_equal(self.xy, other.xy)
            and self.grid == other.grid
            and self.domain.to_dict() == other.domain.to_dict()
        )

    def counts(self) -> np.ndarray:
        return per_period_counts(self)

    def window(self, start, stop) -> "EventLog":
        """Events with ``start <= t < stop``; the time grid is unchanged."""
        lo, hi = np.searchsorted(self.t, [start, stop], side="left")
        return EventLog(self.t[lo:hi], self.xy[lo:hi], self.grid, self.domain, check_domain=False)

    def period(self, t) -> np.ndarray:
        """Locations of the events in period ``t``."""
        lo, hi = np.searchsorted(self.t, [t, t + 1], side="left")
        return self.xy[lo:hi]

    def with_grid(self, grid: TimeGrid) -> "EventLog":
        return EventLog(self.t, self.xy, grid, self.domain, check_domain=False)

    def shifted(self, offset) -> "EventLog":
        """Periods shifted by ``-offset`` onto a grid of ``T - offset`` periods."""
        keep = self.t >= offset
        grid = TimeGrid(self.grid.T - offset, self.grid.d)
        return EventLog(self.t[keep] - offset, self.xy[keep], grid, self.domain, check_domain=False)


def per_period_counts(log: EventLog) -> np.ndarray:
    """Number of events ``n_t`` in each of the ``T`` periods."""
    return np.bincount(log.t, minlength=log.grid.T).astype(np.int64)


def _parse_timestamp(text):
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    stamp = dt.datetime.fromisoformat(text)
    if stamp.tzinfo is not None:
        stamp = stamp.astimezone(dt.timezone.utc).replace(tzinfo=None)
    return stamp


def read_events_csv(path, grid=None, domain=None, origin=DEFAULT_ORIGIN) -> EventLog:
    """Read the ``timestamp,x_km,y_km`` event CSV.

    Timestamps map to periods by floor division of the elapsed time since
    ``origin``. Without an explicit ``grid``, ``T`` is rounded up to whole
    weeks; without a ``domain``, the integer-km bbox of the data is used.
    """
    path = Path(path)
    t, xy = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"timestamp", "x_km", "y_km"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            hours = (_parse_timestamp(row["timestamp"]) - origin) / dt.timedelta(hours=1)
            t.append(math.floor(hours))
            xy.append((float(row["x_km"]), float(row["y_km"])))
    t = np.asarray(t, dtype=np.int64)
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(t) and t.min() < 0:
        raise ValueError(f"{path}: events precede the origin {origin.isoformat()}")
    if grid is None:
        d = 24
        n = int(t.max()) + 1 if len(t) else 1
        grid = TimeGrid(-(-n // (7 * d)) * 7 * d, d)
    if domain is None:
        domain = infer_domain(xy)
    return EventLog(t, xy, grid, domain)


def write_events_csv(log: EventLog, path, origin=DEFAULT_ORIGIN):
    """Write events as ``timestamp,x_km,y_km``; each timestamp is its period start."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "x_km", "y_km"])
        for t, (x, y) in zip(log.t.tolist(), log.xy.tolist()):
            stamp = origin + dt.timedelta(hours=t)
            writer.writerow([stamp.isoformat(), repr(x), repr(y)])
    return path


# --------------------------------------------------------------------------
# Gaussian kernels
# --------------------------------------------------------------------------


def as_points(s):
    """Coerce a coordinate or an array of coordinates to shape ``(n, 2)``."""
    pts = np.asarray(s, dtype=float)
    if pts.shape == (2,):
        return pts.reshape(1, 2), True
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected coordinates of shape (2,) or (n, 2), got {pts.shape}")
    return pts, False


def check_covariance(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (2, 2) or not np.all(np.isfinite(sigma)):
        raise InvalidCovarianceError(f"covariance must be a finite 2x2 matrix, got {sigma!r}")
    if abs(sigma[0, 1] - sigma[1, 0]) > 1e-12 * max(1.0, np.abs(sigma).max()):
        raise InvalidCovarianceError("covariance is not symmetric")
    det = sigma[0, 0] * sigma[1, 1] - sigma[0, 1] * sigma[1, 0]
    if sigma[0, 0] <= 0 or det <= 1e-12:
        raise InvalidCovarianceError(f"covariance is not positive definite (det={det:.3g})")
    return sigma


def gaussian_logpdf(pts, mu, sigma) -> np.ndarray:
    """Log bivariate normal density at each row of ``pts`` (no validation)."""
    a, b, c = sigma[0, 0], sigma[0, 1], sigma[1, 1]
    det = a * c - b * b
    dx = pts[:, 0] - mu[0]
    dy = pts[:, 1] - mu[1]
    quad = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return -0.5 * quad - math.log(_TWO_PI) - 0.5 * math.log(det)


def bivariate_gaussian(s, mu, sigma):
    """Bivariate normal density ``phi(s; mu, sigma)``.

    ``s`` may be a single coordinate (returns a float) or an ``(n, 2)`` array.
    Raises :class:`InvalidCovarianceError` unless ``sigma`` is SPD with
    determinant above 1e-12.
    """
    sigma = check_covariance(sigma)
    pts, single = as_points(s)
    mu = np.asarray(mu, dtype=float).reshape(2)
    out = np.exp(gaussian_logpdf(pts, mu, sigma))
    return float(out[0]) if single else out


def gaussian_kernel(a, b, h) -> np.ndarray:
    """Isotropic Gaussian kernel matrix ``phi(a_i - b_j; 0, h^2 I)``."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    sq = (a[:, None, 0] - b[None, :, 0]) ** 2 + (a[:, None, 1] - b[None, :, 1]) ** 2
    return np.exp(-0.5 * sq / (h * h)) / (_TWO_PI * h * h)


def kernel_box_mass(centers, h, bbox) -> np.ndarray:
    """Mass of each isotropic Gaussian kernel inside an axis-aligned box (exact)."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    xmin, xmax, ymin, ymax = bbox
    mx = ndtr((xmax - centers[:, 0]) / h) - ndtr((xmin - centers[:, 0]) / h)
    my = ndtr((ymax - centers[:, 1]) / h) - ndtr((ymin - centers[:, 1]) / h)
    return mx * my


def _axis_kernel(grid_axis, centers_axis, h):
    return np.exp(-0.5 * ((grid_axis[None, :] - centers_axis[:, None]) / h) ** 2) / (
        math.sqrt(_TWO_PI) * h
    )


def gaussian_sum_grid(centers, weights, h, xs, ys) -> np.ndarray:
    """``sum_i w_i phi_h(g - c_i)`` on the tensor grid ``xs x ys``.

    The isotropic kernel factorizes over axes, so the sum is a matrix product
    of two small kernel tables rather than an ``n x nx x ny`` evaluation.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    out = np.zeros((len(xs), len(ys)))
    for lo in range(0, len(centers), _CHUNK):
        c = centers[lo : lo + _CHUNK]
        kx = _axis_kernel(xs, c[:, 0], h) * weights[lo : lo + _CHUNK, None]
        out += kx.T @ _axis_kernel(ys, c[:, 1], h)
    return out


def kernel_grid_mass(centers, h, xs, ys, inside, cell_area) -> np.ndarray:
    """Per-kernel mass over the grid cells flagged ``inside`` (midpoint rule)."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    inside = inside.astype(float)
    out = np.empty(len(centers))
    for lo in range(0, len(centers), _CHUNK):
        c = centers[lo : lo + _CHUNK]
        kx = _axis_kernel(xs, c[:, 0], h)
        ky = _axis_kernel(ys, c[:, 1], h)
        out[lo : lo + _CHUNK] = np.einsum("ia,ia->i", kx @ inside, ky) * cell_area
    return out


# --------------------------------------------------------------------------
# density models
# --------------------------------------------------------------------------


def _as_range(periods):
    if isinstance(periods, range):
        return periods
    if isinstance(periods, (int, np.integer)):
        return range(int(periods), int(periods) + 1)
    periods = sorted(int(p) for p in periods)
    if not periods:
        raise ValueError("at least one period is required")
    if periods != list(range(periods[0], periods[-1] + 1)):
        raise ValueError("requested periods must be contiguous")
    return range(periods[0], periods[-1] + 1)


class DensityModel(abc.ABC):
    """Predictive spatial density ``f_t(s)`` over a domain, for a range of periods.

    Subclasses implement :meth:`_unnormalized`. Normalization over the domain
    is numeric by default (midpoint rule on a ``NORMALIZATION_GRID`` square
    grid, honoring the mask); subclasses with a closed form override
    :meth:`_domain_mass`. Normalizing constants are cached per
    :meth:`period_key`, so models whose density repeats weekly pay once per
    week position. Evaluation is read-only apart from that idempotent cache.
    """

    def __init__(self, domain: SpatialDomain, periods=range(0, UNBOUNDED)):
        self.domain = domain
        self.periods = _as_range(periods)
        self._mass_cache = {}

    def supports(self, t) -> bool:
        return int(t) in self.periods

    def check_period(self, t) -> int:
        t = int(t)
        if t not in self.periods:
            raise PeriodOutOfRangeError(
                f"period {t} outside the supported range "
                f"[{self.periods.start}, {self.periods.stop})"
            )
        return t

    def period_key(self, t):
        return t

    @abc.abstractmethod
    def _unnormalized(self, pts, t) -> np.ndarray:
        """Density up to the domain normalizing constant, at ``(n, 2)`` points."""

    def _unnormalized_grid(self, xs, ys, t) -> np.ndarray:
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        out = np.concatenate(
            [self._unnormalized(pts[lo : lo + _CHUNK], t) for lo in range(0, len(pts), _CHUNK)]
        )
        return out.reshape(len(xs), len(ys))

    def _domain_mass(self, t) -> float:
        n = NORMALIZATION_GRID
        xs, ys = self.domain.midpoints(n, n)
        vals = self._unnormalized_grid(xs, ys, t)
        return float(np.sum(vals[self.domain.inside_grid(n, n)]) * self.domain.cell_area(n, n))

    def mass(self, t) -> float:
        """Integral of the unnormalized density over the domain."""
        key = self.period_key(t)
        try:
            return self._mass_cache[key]
        except KeyError:
            value = self._domain_mass(t)
            if not value > 0:
                raise ValueError(f"density has no mass inside the domain at period {t}")
            self._mass_cache[key] = value
            return value

    def evaluate(self, s, t):
        """Normalized density at ``s`` (a coordinate or ``(n, 2)`` array); zero outside the domain."""
        t = self.check_period(t)
        pts, single = as_points(s)
        vals = self._unnormalized(pts, t) / self.mass(t)
        vals = np.where(self.domain.contains(pts), vals, 0.0)
        return float(vals[0]) if single else vals

    def grid_values(self, xs, ys, t) -> np.ndarray:
        """Normalized density on the tensor grid ``xs x ys``; zero outside the mask."""
        t = self.check_period(t)
        vals = self._unnormalized_grid(np.asarray(xs, float), np.asarray(ys, float), t)
        vals = vals / self.mass(t)
        if self.domain.mask is not None:
            gx, gy = np.meshgrid(xs, ys, indexing="ij")
            inside = self.domain.contains(np.column_stack([gx.ravel(), gy.ravel()]))
            vals = np.where(inside.reshape(vals.shape), vals, 0.0)
        return vals

    def cell_masses(self, x_edges, y_edges, t, sub=4) -> np.ndarray:
        """Probability mass in each rectangular cell, by ``sub x sub`` midpoint sampling."""
        x_edges = np.asarray(x_edges, dtype=float)
        y_edges = np.asarray(y_edges, dtype=float)
        frac = (np.arange(sub) + 0.5) / sub
        xs = (x_edges[:-1, None] + np.diff(x_edges)[:, None] * frac[None, :]).ravel()
        ys = (y_edges[:-1, None] + np.diff(y_edges)[:, None] * frac[None, :]).ravel()
        vals = self.grid_values(xs, ys, t)
        nx, ny = len(x_edges) - 1, len(y_edges) - 1
        area = np.outer(np.diff(x_edges), np.diff(y_edges)) / (sub * sub)
        return vals.reshape(nx, sub, ny, sub).sum(axis=(1, 3)) * area

    def metadata(self) -> dict:
        return {"model": type(self).__name__}


class UniformDensity(DensityModel):
    """Constant density over the domain."""

    def _unnormalized(self, pts, t):
        return np.ones(len(pts))

    def _unnormalized_grid(self, xs, ys, t):
        return np.ones((len(xs), len(ys)))

    def period_key(self, t):
        return None

    def _domain_mass(self, t):
        return self.domain.area


class GaussianKDEDensity(DensityModel):
    """Weighted isotropic Gaussian KDE, truncated to the domain.

    Parameters
    ----------
    centers : ndarray of shape (n, 2)
    h : float
        Kernel standard deviation (km).
    weights : callable, optional
        ``weights(t) -> (indices, w)``: the kernels used at period ``t`` and
        their non-negative weights. Defaults to all kernels with weight one.
    """

    def __init__(self, centers, h, domain, periods=range(0, UNBOUNDED), weights=None, key=None):
        super().__init__(domain, periods)
        self.centers = np.asarray(centers, dtype=float).reshape(-1, 2)
        if len(self.centers) == 0:
            raise ValueError("a KDE needs at least one center")
        if not h > 0:
            raise ValueError(f"bandwidth must be positive, got {h}")
        self.h = float(h)
        self._weights = weights
        self._key = key
        self._kernel_mass = None

    def period_key(self, t):
        return None if self._key is None else self._key(t)

    def active(self, t):
        if self._weights is None:
            return np.arange(len(self.centers)), np.ones(len(self.centers))
        return self._weights(t)

    def kernel_mass(self):
        """Domain mass of each kernel: exact on a plain bbox, midpoint rule under a mask."""
        if self._kernel_mass is None:
            if self.domain.mask is None:
                self._kernel_mass = kernel_box_mass(self.centers, self.h, self.domain.bbox)
            else:
                n = NORMALIZATION_GRID
                xs, ys = self.domain.midpoints(n, n)
                self._kernel_mass = kernel_grid_mass(
                    self.centers, self.h, xs, ys, self.domain.inside_grid(n, n),
                    self.domain.cell_area(n, n),
                )
        return self._kernel_mass

    def _unnormalized(self, pts, t):
        idx, w = self.active(t)
        out = np.zeros(len(pts))
        centers = self.centers[idx]
        for lo in range(0, len(centers), _CHUNK):
            k = gaussian_kernel(pts, centers[lo : lo + _CHUNK], self.h)
            out += k @ w[lo : lo + _CHUNK]
        return out / w.sum()

    def _unnormalized_grid(self, xs, ys, t):
        idx, w = self.active(t)
        return gaussian_sum_grid(self.centers[idx], w, self.h, xs, ys) / w.sum()

    def _domain_mass(self, t):
        idx, w = self.active(t)
        return float(self.kernel_mass()[idx] @ w / w.sum())

    def cell_masses(self, x_edges, y_edges, t, sub=4):
        if self.domain.mask is not None:
            return super().cell_masses(x_edges, y_edges, t, sub)
        t = self.check_period(t)
        idx, w = self.active(t)
        c = self.centers[idx]
        x_edges = np.asarray(x_edges, dtype=float)
        y_edges = np.asarray(y_edges, dtype=float)
        mx = np.diff(ndtr((x_edges[None, :] - c[:, 0, None]) / self.h), axis=1)
        my = np.diff(ndtr((y_edges[None, :] - c[:, 1, None]) / self.h), axis=1)
        return (mx * w[:, None]).T @ my / w.sum() / self.mass(t)

    def metadata(self):
        return {"model": type(self).__name__, "bandwidth": self.h, "n_kernels": len(self.centers)}


# --------------------------------------------------------------------------
# density grids
# --------------------------------------------------------------------------


@dataclass
class DensityGrid:
    """Cell-center density values over the bbox, normalized so ``sum(values) * cell_area == 1``."""

    domain: SpatialDomain
    nx: int
    ny: int
    values: np.ndarray
    cell_area: float
    t: int | None = None
    metadata: dict = field(default_factory=dict)

    def centers(self):
        return self.domain.midpoints(self.nx, self.ny)

    def total(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def to_csv(self, path):
        """Write ``x_center,y_center,density`` rows plus a JSON sidecar next to ``path``."""
        path = Path(path)
        xs, ys = self.centers()
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x_center", "y_center", "density"])
            for i, x in enumerate(xs.tolist()):
                for j, y in enumerate(ys.tolist()):
                    writer.writerow([repr(x), repr(y), repr(float(self.values[i, j]))])
        sidecar = {
            "domain": self.domain.to_dict(),
            "t": self.t,
            "nx": self.nx,
            "ny": self.ny,
            "cell_area": self.cell_area,
            "metadata": self.metadata,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
        return path

    @classmethod
    def read_csv(cls, path):
        path = Path(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        nx, ny = sidecar["nx"], sidecar["ny"]
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape != (nx * ny, 3):
            raise ValueError(f"{path}: expected {nx * ny} rows, found {len(data)}")
        return cls(
            SpatialDomain.from_dict(sidecar["domain"]),
            nx,
            ny,
            data[:, 2].reshape(nx, ny),
            sidecar["cell_area"],
            sidecar.get("t"),
            sidecar.get("metadata", {}),
        )


def rasterize(model: DensityModel, t, nx=NORMALIZATION_GRID, ny=NORMALIZATION_GRID) -> DensityGrid:
    """Evaluate ``model`` at cell centers and renormalize the grid to unit mass."""
    if nx < 2 or ny < 2:
        raise ValueError(f"grid needs at least 2x2 cells, got {nx}x{ny}")
    t = model.check_period(t)
    domain = model.domain
    xs, ys = domain.midpoints(nx, ny)
    values = model.grid_values(xs, ys, t)
    values = np.where(domain.inside_grid(nx, ny), values, 0.0)
    area = domain.cell_area(nx, ny)
    total = values.sum() * area
    if not total > 0:
        raise ValueError(f"density vanishes on the {nx}x{ny} grid at period {t}")
    return DensityGrid(domain, nx, ny, values / total, area, t, model.metadata())


# --------------------------------------------------------------------------
# shared estimator plumbing
# --------------------------------------------------------------------------


def silverman_bandwidth(xy) -> float:
    """Rule-of-thumb bandwidth: per-axis ``sigma * n**(-1/6)``, geometric mean of the two axes.

    ``sigma`` is the smaller of the standard deviation and IQR / 1.349.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    n = len(xy)
    if n < 2:
        raise ValueError("need at least two points for a plug-in bandwidth")
    sd = xy.std(axis=0, ddof=1)
    q75, q25 = np.percentile(xy, [75, 25], axis=0)
    spread = np.minimum(sd, (q75 - q25) / 1.349)
    spread = np.where(spread > 0, spread, sd)
    if np.any(spread <= 0):
        raise ValueError("points are degenerate along an axis; pass an explicit bandwidth")
    h = spread * n ** (-1.0 / 6.0)
    return float(math.sqrt(h[0] * h[1]))


def trailing_window(log: EventLog, weeks_back) -> EventLog:
    """The last ``weeks_back`` weeks of a training log."""
    if weeks_back < 1:
        raise ValueError(f"weeks_back must be at least 1, got {weeks_back}")
    start = max(0, log.grid.T - int(weeks_back) * log.grid.B)
    return log.window(start, log.grid.T)


def split_log(log: EventLog, T_split):
    """Split at period ``T_split``: a training log on ``[0, T_split)`` and the remaining events."""
    T_split = int(T_split)
    if not 0 < T_split < log.grid.T:
        raise ValueError(f"split point {T_split} must lie inside (0, {log.grid.T})")
    head = log.window(0, T_split)
    train = EventLog(head.t, head.xy, TimeGrid(T_split, log.grid.d), log.domain, check_domain=False)
    return train, log.window(T_split, log.grid.T)
