import math

import numpy as np
import pytest

from stdemand.baselines import naive_kde_predict
from stdemand.core import EventLog, SpatialDomain, TimeGrid, rasterize, silverman_bandwidth, trailing_window
from stdemand.exceptions import DegenerateSeriesError, InsufficientDataError
from stdemand.stkde import (
    RHO2_GRID,
    RHO_GRID,
    CellPartition,
    RhoParams,
    SpatioTemporalKDE,
    StkdeModel,
    _fit_objective,
    acf,
    cell_density_series,
    fit_rhos,
    predict,
    weight,
)

from conftest import fitted, scenario_split

LAGS = np.arange(1, 337)


# --------------------------------------------------------------------------
# weight function


def test_weight_at_lag_zero_is_two(rng):
    for rho in rng.uniform(0, 1, (50, 4)):
        assert weight(0, rho) == 2.0
    assert weight(0, (0.0, 0.0, 0.0, 0.0)) == 2.0


def test_weight_at_one_week(rng):
    # exact equality uses numpy's vectorized power (as weight does); libm pow may differ by an ulp
    week = np.asarray(168)
    for r1, r2, r3, r4 in rng.uniform(0, 1, (50, 4)):
        assert weight(168, (r1, r2, r3, r4)) == np.power(r1, week) + np.power(r2, week)
        assert weight(168, (r1, r2, r3, r4)) == pytest.approx(math.pow(r1, 168) + math.pow(r2, 168), rel=1e-14)


def test_weight_half_day():
    for r3 in (0.0, 0.2, 0.7, 1.0):
        assert weight(12, (0.0, 1.0, r3, 1.0)) == pytest.approx(r3, abs=1e-15)


def test_weight_bounded_by_two(rng):
    lags = rng.integers(0, 5000, 2000)
    rho = rng.uniform(0, 1, (2000, 4))
    w = weight(lags, rho)
    assert (w <= 2.0).all() and (w >= 0).all()


def test_weight_positive_when_a_base_is():
    assert weight(500, (0.0, 0.5, 0.0, 0.0)) == 0.0  # lag 500 is not a multiple of a day
    assert weight(500, (0.9, 0.0, 0.0, 0.0)) > 0
    assert weight(504, (0.0, 0.9, 0.0, 0.0)) > 0  # three weeks: seasonal exponents vanish


def test_weight_rejects_negative_lag():
    with pytest.raises(ValueError):
        weight(-1, (0.5, 0.5, 0.5, 0.5))


# --------------------------------------------------------------------------
# cell series and ACF


def _log(t, xy, T=336, bbox=(0.0, 20.0, 0.0, 25.0)):
    return EventLog(t, xy, TimeGrid(T), SpatialDomain(bbox))


def test_cell_series_all_in_one_cell():
    cells = CellPartition(SpatialDomain((0.0, 20.0, 0.0, 25.0)))
    xy = np.tile([[17.5, 2.0]], (336, 1))  # column 3, row 0
    series = cell_density_series(_log(np.arange(336), xy), cells)
    assert cells.cell_of(xy[:1])[0] == 3
    assert (series[3] == 1.0).all()
    assert (np.delete(series, 3, axis=0) == 0.0).all()


def test_cell_series_empty_period():
    cells = CellPartition(SpatialDomain((0.0, 20.0, 0.0, 25.0)))
    series = cell_density_series(_log([0, 0, 2], [[1, 1], [19, 24], [1, 1]]), cells)
    assert (series[:, 1] == 0).all()
    np.testing.assert_array_equal(series[:, 0].sum(), 1.0)
    assert series[0, 0] == 0.5 and series[19, 0] == 0.5


def test_cell_partition_layout():
    cells = CellPartition(SpatialDomain((0.0, 20.0, 0.0, 25.0)))
    assert cells.n_cells == 20
    assert cells.bounds(0) == (0.0, 5.0, 0.0, 5.0)
    assert cells.bounds(19) == (15.0, 20.0, 20.0, 25.0)
    np.testing.assert_array_equal(cells.cell_of([[0, 0], [20, 25], [7, 6]]), [0, 19, 5])


def test_weekly_scenario_shows_weekly_acf():
    _, train, _ = scenario_split("weekly-5comp", 0)
    cells = CellPartition(train.domain)
    series = cell_density_series(train, cells)
    ratios = [acf(row, 336)[168] > acf(row, 336)[100] for row in series if row.var() > 0]
    assert any(ratios)


def test_acf_lag_zero(rng):
    assert acf(rng.normal(size=500), 10)[0] == 1.0


def test_acf_iid_noise():
    x = np.random.default_rng(3).normal(size=10_000)
    assert np.abs(acf(x, 200)[1:]).max() < 0.05


def test_acf_periodic_series():
    x = np.sin(2 * np.pi * np.arange(33_600) / 168)
    assert acf(x, 336)[168] > 0.99


def test_acf_matches_direct_sum(rng):
    x = rng.normal(size=400) + np.sin(np.arange(400) / 7)
    xc = x - x.mean()
    direct = np.array([math.fsum(xc[: len(x) - k] * xc[k:]) for k in range(60)]) / math.fsum(xc * xc)
    np.testing.assert_allclose(acf(x, 59), direct, atol=1e-12)


def test_acf_errors():
    with pytest.raises(DegenerateSeriesError):
        acf(np.full(100, 0.3), 10)
    with pytest.raises(ValueError):
        acf(np.arange(10.0), 10)


# --------------------------------------------------------------------------
# fitting the weight parameters


@pytest.mark.parametrize("nugget", [True, False])
@pytest.mark.parametrize("rho", [(0.9, 0.99, 0.3, 0.1), (0.6, 0.97, 0.5, 0.5), (0.3, 0.95, 0.7, 0.9)])
def test_fit_rhos_recovers_generating_parameters(rho, nugget):
    a = weight(np.arange(337), rho) / weight(0, rho)
    fitted_rho = fit_rhos([a], nugget=nugget).values[0]
    assert np.abs(fitted_rho - rho).max() < 0.05


def test_fit_rhos_recovery_random():
    rng = np.random.default_rng(11)
    for _ in range(10):
        rho = np.r_[rng.uniform(0.1, 0.9), rng.uniform(0.9, 1.0), rng.uniform(0.1, 0.9, 2)]
        got = fit_rhos([weight(np.arange(337), rho) / 2]).values[0]
        assert np.abs(got - rho).max() < 0.05


def _best_grid_objective(target, nugget):
    """Brute force over every coarse-grid candidate, scored one chunk at a time."""
    g = np.array(np.meshgrid(RHO_GRID, RHO2_GRID, RHO_GRID, RHO_GRID, indexing="ij")).reshape(4, -1).T
    best = np.inf
    for lo in range(0, len(g), 2000):
        w = weight(LAGS[None, :], g[lo : lo + 2000, None, :]) / 2.0
        if nugget:
            c = np.clip((w @ target) / np.maximum((w * w).sum(axis=1), 1e-300), 0.0, 1.0)
        else:
            c = np.ones(len(w))
        best = min(best, float(np.min(np.sum((c[:, None] * w - target) ** 2, axis=1))))
    return best


@pytest.mark.parametrize("nugget", [True, False])
def test_fit_rhos_flat_acf_beats_every_grid_candidate(nugget):
    level = 0.37
    a = np.r_[1.0, np.full(336, level)]
    rho = fit_rhos([a], nugget=nugget).values[0]
    target = np.full(336, level)
    got = _fit_objective(rho, LAGS, target, np.ones(336), nugget)
    assert got <= _best_grid_objective(target, nugget) + 1e-12


def test_fit_rhos_degenerate_cells_use_default():
    good = weight(np.arange(337), (0.5, 0.99, 0.4, 0.4)) / 2
    out = fit_rhos([None, good, None]).values
    np.testing.assert_array_equal(out[0], (0.0, out[1, 1], 1.0, 1.0))
    np.testing.assert_array_equal(out[2], out[0])
    np.testing.assert_array_equal(fit_rhos([None]).values[0], (0.0, 0.99, 1.0, 1.0))


def test_fit_rhos_needs_two_weeks():
    with pytest.raises(ValueError):
        fit_rhos([np.ones(200)], max_lag=199)
    with pytest.raises(ValueError):
        fit_rhos([np.ones(200)])


def test_fit_rhos_deterministic():
    a = np.r_[1.0, 0.5 * np.cos(2 * np.pi * LAGS / 24) ** 2 + 0.1]
    np.testing.assert_array_equal(fit_rhos([a]).values, fit_rhos([a]).values)


def _daily_factor(rho, lag):
    # the daily seasonal factor alone: rho3 ** sin^2(pi lag / 24)
    return weight(lag, (0.0, 1.0, rho[2], 1.0))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_downtown_cell_has_sharper_daily_contrast(seed):
    _, train, _ = scenario_split("daily-downtown", seed)
    est = SpatioTemporalKDE().fit(train)
    downtown, *periphery = est.cells_.cell_of([(10.0, 12.5), (4.5, 5.0), (15.5, 6.0), (6.0, 20.0)])
    rhos = est.rhos_.values

    def contrast(r):
        return _daily_factor(r, 24) / _daily_factor(r, 25)

    for cell in periphery:
        assert contrast(rhos[downtown]) > contrast(rhos[cell])
        # peak-to-trough over the day with the full weight function
        assert weight(24, rhos[downtown]) / weight(12, rhos[downtown]) > weight(24, rhos[cell]) / weight(
            12, rhos[cell]
        )


# --------------------------------------------------------------------------
# prediction


def test_unit_rhos_reduce_to_naive_kde():
    _, train, _ = scenario_split("weekly-5comp", 1)
    window = trailing_window(train, 8)
    h = silverman_bandwidth(window.xy)
    cells = CellPartition(train.domain)
    rhos = RhoParams(np.tile([1.0, 0.0, 0.3, 0.6], (cells.n_cells, 1)))
    model = predict(StkdeModel(window, rhos, h, cells), range(train.grid.T, train.grid.T + 10))
    naive = naive_kde_predict(train, range(train.grid.T, train.grid.T + 10))
    pts = np.random.default_rng(0).uniform(0, 20, (300, 2))
    for t in (train.grid.T, train.grid.T + 7):
        assert np.max(np.abs(model.evaluate(pts, t) - naive.evaluate(pts, t))) < 1e-12


def test_single_event_is_a_gaussian_bump():
    domain = SpatialDomain((0.0, 100.0, 0.0, 100.0))
    log = EventLog([5], [[50.0, 40.0]], TimeGrid(336), domain)
    cells = CellPartition(domain)
    model = predict(StkdeModel(log, RhoParams(np.full((20, 4), 0.5)), 2.0, cells), 400)
    pts = np.array([[50.0, 40.0], [52.0, 41.0], [47.0, 37.0]])
    sq = ((pts - [50.0, 40.0]) ** 2).sum(axis=1)
    np.testing.assert_allclose(model.evaluate(pts, 400), np.exp(-sq / 8.0) / (8.0 * math.pi), rtol=1e-12)


def test_zero_weights_fall_back_to_unweighted(caplog):
    domain = SpatialDomain((0.0, 20.0, 0.0, 25.0))
    log = EventLog([0, 3], [[5.0, 5.0], [10.0, 10.0]], TimeGrid(336), domain)
    cells = CellPartition(domain)
    model = predict(StkdeModel(log, RhoParams(np.zeros((20, 4))), 1.0, cells), 400)
    with caplog.at_level("WARNING", logger="stdemand.stkde"):
        a = model.evaluate([(5.0, 5.0), (10.0, 10.0)], 400)
    assert "vanish" in caplog.text
    assert a[0] == pytest.approx(a[1], rel=1e-12)


def test_predictions_invariant_to_event_order():
    _, train, _ = scenario_split("weekly-5comp", 2)
    window = trailing_window(train, 8)
    perm = np.random.default_rng(1).permutation(len(window))
    shuffled = EventLog(window.t[perm], window.xy[perm], window.grid, window.domain)
    cells = CellPartition(train.domain)
    rhos = RhoParams(np.random.default_rng(2).uniform(0.2, 1.0, (20, 4)))
    t = train.grid.T + 3
    a = predict(StkdeModel(window, rhos, 0.8, cells), t)
    b = predict(StkdeModel(shuffled, rhos, 0.8, cells), t)
    pts = np.random.default_rng(3).uniform(0, 20, (100, 2))
    np.testing.assert_allclose(a.evaluate(pts, t), b.evaluate(pts, t), rtol=1e-12)


def test_stkde_normalized_and_nonnegative():
    est = fitted("weekly-5comp", 0, "stkde")
    T = est.model_.T_train
    model = est.predict(range(T, T + 672))
    xs, ys = model.domain.midpoints(200, 200)
    for t in (T, T + 333, T + 671):
        vals = model.grid_values(xs, ys, t)
        assert (vals >= 0).all()
        assert vals.sum() * model.domain.cell_area(200, 200) == pytest.approx(1.0, abs=1e-2)


def test_stkde_beats_naive_on_weekly_scenario():
    from stdemand.evaluation import mean_neg_log_lik

    from conftest import test_periods

    _, _, test = scenario_split("weekly-5comp", 0)
    stkde = mean_neg_log_lik(fitted("weekly-5comp", 0, "stkde").predict(test_periods()), test)
    naive = mean_neg_log_lik(fitted("weekly-5comp", 0, "naivekde").predict(test_periods()), test)
    assert stkde < naive


def test_estimator_round_trip_and_errors(tmp_path):
    est = fitted("weekly-5comp", 0, "stkde")
    back = SpatioTemporalKDE.from_dict(est.to_dict())
    T = est.model_.T_train
    pts = np.random.default_rng(0).uniform(0, 20, (50, 2))
    np.testing.assert_array_equal(back.predict(T + 5).evaluate(pts, T + 5), est.predict(T + 5).evaluate(pts, T + 5))
    path = est.rhos_.to_csv(tmp_path / "rhos.csv")
    np.testing.assert_array_equal(RhoParams.read_csv(path).values, est.rhos_.values)
    with pytest.raises(ValueError):
        RhoParams([[0.5, 1.2, 0.5, 0.5]])
    with pytest.raises(InsufficientDataError):
        SpatioTemporalKDE().fit(EventLog([], np.empty((0, 2)), TimeGrid(336), SpatialDomain((0, 1, 0, 1))))


def test_fit_is_deterministic():
    _, train, _ = scenario_split("weekly-5comp", 3)
    a = SpatioTemporalKDE().fit(train)
    b = SpatioTemporalKDE().fit(train)
    np.testing.assert_array_equal(a.rhos_.values, b.rhos_.values)
    assert rasterize(a.predict(train.grid.T), train.grid.T, 50, 50).values.tolist() == rasterize(
        b.predict(train.grid.T), train.grid.T, 50, 50
    ).values.tolist()
