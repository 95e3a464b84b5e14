import json
import math

import numpy as np
import pytest

from stdemand.baselines import cell_edges
from stdemand.core import EventLog, GaussianKDEDensity, SpatialDomain, TimeGrid, UniformDensity
from stdemand.evaluation import (
    DENSITY_FLOOR,
    EvaluationReport,
    compare,
    log_scores,
    mean_neg_log_lik,
    rmse_counts,
    weekly_mean_volume,
)
from stdemand.exceptions import InsufficientDataError, PeriodOutOfRangeError
from stdemand.simulate import make_scenario, sample_log

from conftest import fitted, scenario_split, test_periods

B = 168


def _random_log(n, T=B, bbox=(0.0, 10.0, 0.0, 10.0), seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = np.array(bbox[::2]), np.array(bbox[1::2])
    return EventLog(np.sort(rng.integers(0, T, n)), rng.uniform(lo, hi, (n, 2)), TimeGrid(T), SpatialDomain(bbox))


def test_uniform_density_scores_log_area():
    log = _random_log(137)
    assert mean_neg_log_lik(UniformDensity(log.domain), log) == pytest.approx(math.log(100), abs=1e-12)
    assert mean_neg_log_lik(UniformDensity(log.domain), log) == pytest.approx(4.60517, abs=1e-5)


def _entropy_rate_by_quadrature(truth, periods, n=400):
    """Volume-weighted ``-int f log f`` on a fine midpoint grid."""
    xs, ys = truth.domain.midpoints(n, n)
    area = truth.domain.cell_area(n, n)
    weeks = {}
    for t in periods:
        b = t % B
        if b not in weeks:
            f = truth.density.grid_values(xs, ys, t)
            f = f[f > 0]
            weeks[b] = -float(np.sum(f * np.log(f)) * area)
    w = truth.delta[list(periods)]
    return float(np.sum(w * np.array([weeks[t % B] for t in periods])) / w.sum())


def test_truth_score_near_entropy_rate():
    truth, _, test = scenario_split("weekly-5comp", 0)
    score = mean_neg_log_lik(truth.density, test)
    assert abs(score - _entropy_rate_by_quadrature(truth, test_periods())) < 0.05


def test_identical_models_identical_scores():
    _, _, test = scenario_split("weekly-5comp", 0)
    test = test.window(test_periods().start, test_periods().start + 48)
    a = fitted("weekly-5comp", 0, "naivekde").predict(test_periods())
    b = fitted("weekly-5comp", 0, "naivekde").predict(test_periods())
    assert mean_neg_log_lik(a, test) == mean_neg_log_lik(b, test)


def test_scoring_invariant_to_event_order():
    _, _, test = scenario_split("weekly-5comp", 1)
    test = test.window(test_periods().start, test_periods().start + 48)
    model = fitted("weekly-5comp", 1, "stkde").predict(test_periods())
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(test))
    shuffled = EventLog(test.t[perm], test.xy[perm], test.grid, test.domain)
    assert mean_neg_log_lik(model, shuffled) == mean_neg_log_lik(model, test)


def test_density_floor_is_counted():
    log = _random_log(20, bbox=(0.0, 100.0, 0.0, 100.0))
    far = GaussianKDEDensity([[1.0, 1.0]], 0.05, log.domain)
    scores, floored = log_scores(far, log)
    assert floored == 20
    np.testing.assert_allclose(scores, -math.log(DENSITY_FLOOR))
    assert np.isfinite(mean_neg_log_lik(far, log))


def test_scoring_errors():
    log = _random_log(10)
    with pytest.raises(PeriodOutOfRangeError):
        mean_neg_log_lik(UniformDensity(log.domain, periods=range(200, 300)), log)
    empty = EventLog([], np.empty((0, 2)), TimeGrid(B), log.domain)
    with pytest.raises(InsufficientDataError):
        mean_neg_log_lik(UniformDensity(log.domain), empty)


@pytest.mark.parametrize("name", ["static-3comp", "weekly-5comp"])
def test_gibbs_inequality_over_seeds(name):
    truth_scores, uniform_scores = [], []
    for seed in range(20):
        truth = make_scenario(name, 1, seed)
        log = sample_log(truth, seed + 100)
        truth_scores.append(mean_neg_log_lik(truth.density, log))
        uniform_scores.append(mean_neg_log_lik(UniformDensity(truth.domain), log))
    assert np.mean(truth_scores) <= np.mean(uniform_scores) + 1e-9


# --------------------------------------------------------------------------
# RMSE


def test_rmse_zero_for_perfect_predictions():
    domain = SpatialDomain((0.0, 2.0, 0.0, 1.0))
    # one event per period, always in the left cell; a model with all mass there
    log = EventLog(np.arange(10), np.tile([[0.5, 0.5]], (10, 1)), TimeGrid(10), domain)

    class LeftCell(UniformDensity):
        def cell_masses(self, x_edges, y_edges, t, sub=4):
            return np.array([[1.0], [0.0]])

    assert rmse_counts(LeftCell(domain), np.ones(10), log) == 0.0


def test_rmse_of_zero_prediction_is_count_level():
    domain = SpatialDomain((0.0, 2.0, 0.0, 2.0))
    xy = np.array([[0.5, 0.5], [0.5, 1.5], [1.5, 0.5], [1.5, 1.5]] * 3)
    log = EventLog(np.repeat(np.arange(3), 4), xy, TimeGrid(3), domain)
    mu = 1.0  # every cell holds exactly one event per period
    assert rmse_counts(UniformDensity(domain), np.zeros(3), log) == pytest.approx(mu, abs=1e-15)


def _simulated_noise_floor(truth, periods, reps=50, seed=0):
    """RMSE of exact expected counts against fresh Poisson draws."""
    rng = np.random.default_rng(seed)
    x_edges, y_edges = cell_edges(truth.domain, 1.0)
    sq, n = 0.0, 0
    for t in periods[::7]:
        lam = truth.delta[t] * truth.density.cell_masses(x_edges, y_edges, t)
        draws = rng.poisson(lam, (reps,) + lam.shape)
        sq += float(np.sum((draws - lam) ** 2))
        n += draws.size
    return math.sqrt(sq / n)


def test_rmse_truth_near_poisson_floor():
    truth, _, test = scenario_split("weekly-5comp", 0)
    periods = test_periods()
    got = rmse_counts(truth.density, truth.delta, test, periods=periods)
    x_edges, y_edges = cell_edges(truth.domain, 1.0)
    n_cells = (len(x_edges) - 1) * (len(y_edges) - 1)
    analytic = math.sqrt(truth.delta[list(periods)].mean() / n_cells)
    assert abs(got - analytic) / analytic < 0.10
    assert abs(got - _simulated_noise_floor(truth, periods)) / got < 0.10


def test_weekly_mean_volume():
    log = EventLog([0, 0, 1, B, B + 1, B + 1, B + 1], np.full((7, 2), 0.5), TimeGrid(2 * B),
                   SpatialDomain((0.0, 1.0, 0.0, 1.0)))
    vol = weekly_mean_volume(log)
    assert vol(0) == 1.5 and vol(1) == 2.0 and vol(2) == 0.0
    assert vol(2 * B + 1) == 2.0


# --------------------------------------------------------------------------
# comparison reports


def test_compare_ties_broken_by_name():
    log = _random_log(50)
    model = UniformDensity(log.domain)
    report = compare({"b": model, "a": model}, log)
    assert report.ranking() == ["a", "b"]
    assert report["a"].loglik == report["b"].loglik
    assert [s.rank for s in report.scores] == [1, 2]


def test_compare_totals_and_errors():
    _, _, test = scenario_split("weekly-5comp", 0)
    models = {m: fitted("weekly-5comp", 0, m).predict(test_periods()) for m in ("naivekde", "medic")}
    report = compare(models, test)
    for s in report.scores:
        assert s.events_scored == len(test)
        assert s.periods_covered == len(np.unique(test.t))
        assert s.rmse is None
    with pytest.raises(ValueError):
        compare({"only": models["medic"]}, test)


def test_compare_ordering_on_weekly_scenario():
    _, train, test = scenario_split("weekly-5comp", 0)
    names = ("gmm", "stkde", "naivekde", "medic")
    models = {m: fitted("weekly-5comp", 0, m).predict(test_periods()) for m in names}
    report = compare(models, test, delta_hat=weekly_mean_volume(train))
    rank = {s.name: s.rank for s in report.scores}
    assert rank["gmm"] < rank["naivekde"] < rank["medic"]
    assert rank["stkde"] < rank["naivekde"]
    assert all(s.rmse is not None and s.rmse > 0 for s in report.scores)


def test_report_serialization():
    log = _random_log(30)
    report = compare({"u1": UniformDensity(log.domain), "u2": UniformDensity(log.domain)}, log,
                     delta_hat=np.full(B, 0.2), metadata={"seed": 3})
    data = json.loads(report.to_json())
    assert data["schema_version"] == 1
    assert data["metadata"] == {"seed": 3}
    assert [m["name"] for m in data["models"]] == ["u1", "u2"]
    assert set(data["models"][0]) >= {"loglik", "rmse", "events_scored", "periods_covered", "floored", "rank"}
    text = report.to_text()
    assert text.splitlines()[0].split() == ["rank", "model", "logLik", "RMSE", "events", "periods", "floored"]
    assert "seed=3" in text
    assert isinstance(report, EvaluationReport)
