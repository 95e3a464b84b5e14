import math

import numpy as np
import pytest

from stdemand.baselines import (
    MEDIC,
    WEEKS_PER_YEAR,
    CountGrid,
    MedicDensity,
    NaiveKDE,
    cell_edges,
    medic_expected_counts,
    medic_periods,
    medic_predict,
    naive_kde_predict,
)
from stdemand.core import EventLog, SpatialDomain, TimeGrid
from stdemand.exceptions import InsufficientDataError

from conftest import fitted, scenario_split

B = 168


def _count_grid(counts, bbox=(0.0, 3.0, 0.0, 2.0)):
    counts = np.asarray(counts, dtype=np.int64)
    return CountGrid(SpatialDomain(bbox), TimeGrid(len(counts)), counts)


# --------------------------------------------------------------------------
# MEDIC


def test_medic_mean_of_four_weeks():
    counts = np.zeros((4 * B, 3, 2), dtype=np.int64)
    for k, c in enumerate([2, 0, 1, 1]):
        counts[k * B + 10, 1, 1] = c
    expected = medic_expected_counts(_count_grid(counts), 4 * B + 10, weeks=4, years=1)
    assert expected[1, 1] == 1.0
    assert expected.sum() == 1.0


def test_medic_all_zero_history_positive_density():
    grid = _count_grid(np.zeros((4 * B, 3, 2)))
    counts, density = medic_predict(grid, 4 * B + 5)
    assert (counts == 0).all()
    vals = density.evaluate(np.array([[0.5, 0.5], [2.5, 1.5]]), 4 * B + 5)
    assert (vals > 0).all()
    assert vals[0] == pytest.approx(1 / 6, rel=1e-12)  # uniform over a 3 x 2 km box


def test_medic_stationary_poisson_mean():
    mu = 3.7
    rng = np.random.default_rng(0)
    grid = _count_grid(rng.poisson(mu, (8 * B, 40, 40)), bbox=(0.0, 40.0, 0.0, 40.0))
    expected = medic_expected_counts(grid, 8 * B + 3, weeks=8)
    se = math.sqrt(mu / 8 / expected.size)
    assert abs(expected.mean() - mu) < 3 * se


def test_medic_total_equals_mean_of_totals():
    _, train, _ = scenario_split("weekly-5comp", 0)
    grid = CountGrid.from_log(train)
    for t in (train.grid.T, train.grid.T + 50, train.grid.T + 500):
        sel = medic_periods(train.grid.T, t, B, 4, 1)
        totals = np.bincount(train.t, minlength=train.grid.T)[sel]
        assert medic_expected_counts(grid, t).sum() == pytest.approx(totals.mean(), abs=1e-12)


def test_medic_periods_anchor_and_years():
    # the last available week position, then whole weeks back
    np.testing.assert_array_equal(medic_periods(8 * B, 8 * B + 5, B, 4, 1), [7 * B + 5 - k * B for k in range(4)])
    np.testing.assert_array_equal(medic_periods(8 * B, 9 * B + 5, B, 2, 1), [7 * B + 5, 6 * B + 5])
    periods = medic_periods(60 * B, 60 * B, B, 2, 2)
    year = WEEKS_PER_YEAR * B
    np.testing.assert_array_equal(periods, [59 * B, 58 * B, 59 * B - year, 58 * B - year])
    assert np.all(periods % B == 0)


def test_medic_insufficient_history():
    with pytest.raises(InsufficientDataError):
        medic_periods(3 * B, 3 * B, B, 4, 1)
    with pytest.raises(InsufficientDataError):
        MEDIC(weeks=4, years=2).fit(scenario_split("weekly-5comp", 0)[1])
    with pytest.raises(ValueError):
        medic_periods(8 * B, 8 * B, B, 0, 1)


def test_medic_density_normalized_under_mask():
    _, train, _ = scenario_split("bay-cshape", 0)
    est = MEDIC().fit(train)
    T = train.grid.T
    model = est.predict(range(T, T + 10))
    xs, ys = model.domain.midpoints(200, 200)
    for t in (T, T + 9):
        assert model.grid_values(xs, ys, t).sum() * model.domain.cell_area(200, 200) == pytest.approx(1.0, abs=1e-2)
        x_edges, y_edges = model.x_edges, model.y_edges
        assert model.cell_masses(x_edges, y_edges, t).sum() == pytest.approx(1.0, abs=1e-12)


def test_medic_weekly_key_and_expected_counts():
    est = fitted("weekly-5comp", 0, "medic")
    T = est.history_.grid.T
    model = est.predict(range(T, T + 400))
    assert model.period_key(T + 3) == model.period_key(T + 3 + B)
    np.testing.assert_array_equal(model.expected_counts(T + 3), est.expected_counts(T + 3))
    assert isinstance(model, MedicDensity)


def test_count_grid_from_log_and_csv(tmp_path):
    domain = SpatialDomain((0.0, 2.5, 0.0, 2.0))
    log = EventLog([0, 0, 3], [[0.2, 0.2], [2.4, 1.9], [1.5, 0.5]], TimeGrid(5), domain)
    grid = CountGrid.from_log(log)
    assert grid.shape == (3, 2)  # last column clipped to 0.5 km
    np.testing.assert_array_equal(cell_edges(domain)[0], [0.0, 1.0, 2.0, 2.5])
    assert grid.counts[0, 0, 0] == 1 and grid.counts[0, 2, 1] == 1 and grid.counts[3, 1, 0] == 1
    np.testing.assert_array_equal(grid.totals(), [2, 0, 0, 1, 0])
    for zeros in (False, True):
        path = grid.to_csv(tmp_path / f"counts{zeros}.csv", include_zeros=zeros)
        assert path.read_text().splitlines()[0] == "cell_x,cell_y,t,count"
        back = CountGrid.read_csv(path, domain, log.grid)
        np.testing.assert_array_equal(back.counts, grid.counts)


def test_medic_round_trip_and_determinism():
    est = fitted("weekly-5comp", 1, "medic")
    _, train, _ = scenario_split("weekly-5comp", 1)
    again = MEDIC().fit(train)
    back = MEDIC.from_dict(est.to_dict())
    T = train.grid.T
    pts = np.random.default_rng(0).uniform(0, 20, (50, 2))
    ref = est.predict(T + 7).evaluate(pts, T + 7)
    np.testing.assert_array_equal(again.predict(T + 7).evaluate(pts, T + 7), ref)
    np.testing.assert_array_equal(back.predict(T + 7).evaluate(pts, T + 7), ref)


# --------------------------------------------------------------------------
# naive KDE


def _phi_box(c, h, lo, hi):
    return 0.5 * (math.erf((hi - c) / (h * math.sqrt(2))) - math.erf((lo - c) / (h * math.sqrt(2))))


def _brute_force_kde(sites, events, h, bbox):
    """Truncated Gaussian KDE written as explicit loops."""
    xmin, xmax, ymin, ymax = bbox
    mass = 0.0
    for ex, ey in events:
        mass += _phi_box(ex, h, xmin, xmax) * _phi_box(ey, h, ymin, ymax)
    out = []
    for sx, sy in sites:
        total = 0.0
        for ex, ey in events:
            total += math.exp(-((sx - ex) ** 2 + (sy - ey) ** 2) / (2 * h * h)) / (2 * math.pi * h * h)
        out.append(total / mass)
    return np.array(out)


@pytest.mark.parametrize("seed", range(5))
def test_naive_kde_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    bbox = (0.0, 10.0, 0.0, 10.0)
    events = rng.uniform(0, 10, (10, 2))
    sites = rng.uniform(0, 10, (10, 2))
    h = rng.uniform(0.5, 2.0)
    log = EventLog(np.sort(rng.integers(0, B, 10)), events, TimeGrid(B), SpatialDomain(bbox))
    model = naive_kde_predict(log, B, h=h)
    got = model.evaluate(sites, B)
    want = _brute_force_kde(sites, log.xy, h, bbox)
    assert np.max(np.abs(got - want)) < 1e-12


def test_naive_single_event_bump():
    log = EventLog([3], [[50.0, 50.0]], TimeGrid(B), SpatialDomain((0.0, 100.0, 0.0, 100.0)))
    model = naive_kde_predict(log, B, h=1.5)
    assert model.evaluate((50.0, 50.0), B) == pytest.approx(1 / (2 * math.pi * 2.25), rel=1e-12)
    assert model.evaluate((51.5, 50.0), B) == pytest.approx(math.exp(-0.5) / (2 * math.pi * 2.25), rel=1e-12)


def test_naive_uses_trailing_window_only():
    domain = SpatialDomain((0.0, 10.0, 0.0, 10.0))
    log = EventLog([0, 3 * B + 1], [[1.0, 1.0], [8.0, 8.0]], TimeGrid(4 * B), domain)
    model = naive_kde_predict(log, 4 * B, weeks_back=1, h=1.0)
    assert model.centers.tolist() == [[8.0, 8.0]]
    with pytest.raises(InsufficientDataError):
        naive_kde_predict(EventLog([0], [[1.0, 1.0]], TimeGrid(4 * B), domain), 4 * B, weeks_back=1)


def test_naive_estimator_normalized_deterministic():
    _, train, _ = scenario_split("bay-cshape", 0)
    a, b = NaiveKDE().fit(train), NaiveKDE().fit(train)
    T = train.grid.T
    model = a.predict(range(T, T + 5))
    xs, ys = model.domain.midpoints(200, 200)
    assert model.grid_values(xs, ys, T).sum() * model.domain.cell_area(200, 200) == pytest.approx(1.0, abs=1e-2)
    pts = np.random.default_rng(0).uniform(2, 23, (50, 2))
    np.testing.assert_array_equal(model.evaluate(pts, T), b.predict(T).evaluate(pts, T))
    back = NaiveKDE.from_dict(a.to_dict())
    np.testing.assert_array_equal(back.predict(T).evaluate(pts, T), model.evaluate(pts, T))
