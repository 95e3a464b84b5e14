"""Shared fixtures: simulated logs and fitted models, cached for the whole session."""

import functools

import numpy as np
import pytest

from stdemand.baselines import MEDIC, NaiveKDE
from stdemand.core import split_log
from stdemand.gmm import TimeVaryingGMM
from stdemand.simulate import make_scenario, sample_log
from stdemand.stkde import SpatioTemporalKDE

TRAIN_WEEKS = 8
TEST_WEEKS = 4
B = 168
ORDERING_SEEDS = (0, 1, 2, 3, 4)


@functools.lru_cache(maxsize=None)
def scenario_split(name, seed, train_weeks=TRAIN_WEEKS, test_weeks=TEST_WEEKS):
    """(truth, train, test) for a scenario: train on the first weeks, test on the rest."""
    truth = make_scenario(name, train_weeks + test_weeks, seed)
    log = sample_log(truth, seed)
    T = train_weeks * B
    train, rest = split_log(log, T)
    return truth, train, rest.window(T, truth.grid.T)


@functools.lru_cache(maxsize=None)
def fitted(name, seed, method):
    _, train, _ = scenario_split(name, seed)
    if method == "gmm":
        est = TimeVaryingGMM(random_state=seed)
    elif method == "stkde":
        est = SpatioTemporalKDE()
    elif method == "naivekde":
        est = NaiveKDE()
    elif method == "medic":
        est = MEDIC()
    else:
        raise ValueError(method)
    return est.fit(train)


def test_periods(seed=None):
    return range(TRAIN_WEEKS * B, (TRAIN_WEEKS + TEST_WEEKS) * B)


test_periods.__test__ = False


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
