"""Forecast spatial densities of sparse spatio-temporal event streams.

Three estimators (a time-varying Gaussian mixture, an informativeness-weighted
spatio-temporal KDE and a graph-warped KDE), two baselines, a ground-truth
simulator and an evaluation harness.
"""

__version__ = "0.1.0"

from .baselines import MEDIC, CountGrid, NaiveKDE, medic_predict, naive_kde_predict
from .core import (
    DensityGrid,
    DensityModel,
    Event,
    EventLog,
    GaussianKDEDensity,
    SpatialDomain,
    TimeGrid,
    UniformDensity,
    bivariate_gaussian,
    per_period_counts,
    rasterize,
    read_events_csv,
    write_events_csv,
)
from .evaluation import EvaluationReport, compare, mean_neg_log_lik, rmse_counts
from .exceptions import (
    CrossValidationError,
    DegenerateSeriesError,
    InsufficientDataError,
    InvalidCovarianceError,
    PeriodOutOfRangeError,
    SimplexBoundaryError,
    SingularSystemError,
)
from .gmm import CARParams, GmmFitConfig, MixtureState, TimeVaryingGMM
from .io import load_model, save_model
from .simulate import SCENARIOS, GroundTruth, make_scenario, sample_log
from .stkde import CellPartition, RhoParams, SpatioTemporalKDE
from .warp import KernelWarpingKDE, PointCloud, WarpSystem

__all__ = [
    "CARParams",
    "CellPartition",
    "CountGrid",
    "CrossValidationError",
    "DegenerateSeriesError",
    "DensityGrid",
    "DensityModel",
    "EvaluationReport",
    "Event",
    "EventLog",
    "GaussianKDEDensity",
    "GmmFitConfig",
    "GroundTruth",
    "InsufficientDataError",
    "InvalidCovarianceError",
    "KernelWarpingKDE",
    "MEDIC",
    "MixtureState",
    "NaiveKDE",
    "PeriodOutOfRangeError",
    "PointCloud",
    "RhoParams",
    "SCENARIOS",
    "SimplexBoundaryError",
    "SingularSystemError",
    "SpatialDomain",
    "SpatioTemporalKDE",
    "TimeGrid",
    "TimeVaryingGMM",
    "UniformDensity",
    "WarpSystem",
    "bivariate_gaussian",
    "compare",
    "load_model",
    "make_scenario",
    "mean_neg_log_lik",
    "medic_predict",
    "naive_kde_predict",
    "per_period_counts",
    "rasterize",
    "read_events_csv",
    "rmse_counts",
    "sample_log",
    "save_model",
    "write_events_csv",
]
