"""
Tests for additive / multiplicative functionals and terminal times
"""

import logging
import math

import numpy as np
import pytest

from errors import RateBoundError
from extended_state import StateSpaceTag
from functionals import (
    AfTrace,
    Censored,
    ConstantRate,
    Deterministic,
    HitClosedSet,
    IndicatorMfTrace,
    QuadraticRate,
    RateFunction,
    additive_integral,
    additive_trace,
    hitting_time,
    is_censored,
    lifetime_value,
    ls_increment,
    mf_from_af,
    mf_terminal,
    path_lifetime,
    terminal_identity_holds,
    terminal_time,
)
from process_models import DEAD_INDEX, GridPath, JumpPath, shift_path

logger = logging.getLogger(__name__)

TAG = StateSpaceTag(0, 3)
RATES = RateFunction.on_states([1.0, 2.0, 3.0], TAG)


def staircase() -> JumpPath:
    return JumpPath(np.array([0.0, 1.0, 2.0]), np.array([0, 1, 2]), 3.0, TAG)


def test_additive_trace_on_jump_path():
    trace = additive_trace(staircase(), RATES)
    assert trace.horizon == 3.0
    assert trace.value_at(3.0) == pytest.approx(6.0)
    assert trace.value_at(1.5) == pytest.approx(2.0)
    assert trace.first_passage(2.0) == pytest.approx(1.5)
    assert trace.first_passage(0.0) == 0.0
    assert trace.first_passage(7.0) == Censored(3.0)
    logger.info("✓ additive trace on jump path")


def test_additivity_under_shift():
    p = staircase()
    for s, t in [(0.5, 2.0), (1.0, 1.0), (0.25, 2.75)]:
        whole = additive_integral(p, RATES, s + t)
        split = additive_integral(p, RATES, s) + additive_integral(shift_path(p, s), RATES, t)
        assert abs(whole - split) <= 1e-12
    logger.info("✓ additivity under shift")


def test_additive_trace_on_grid_uses_left_endpoints():
    p = GridPath(0.5, np.array([0.0, 1.0, 2.0]))
    c = RateFunction.on_line(QuadraticRate(1.0, 100.0), 100.0)
    trace = additive_trace(p, c)
    assert np.allclose(trace.values, [0.0, 0.0, 0.5])
    logger.info("✓ additive trace on grid uses left endpoints")


def test_grid_trace_stops_at_death():
    p = GridPath(0.1, np.array([0.0, 1.0, 2.0, np.nan, np.nan]), death_time=0.25)
    c = RateFunction.on_line(ConstantRate(1.0), 1.0)
    assert additive_integral(p, c, 0.4) == pytest.approx(0.25)
    assert path_lifetime(p) == pytest.approx(0.25)
    logger.info("✓ grid trace stops at death")


def test_rate_bounds_are_enforced():
    c = RateFunction.on_line(QuadraticRate(1.0, 10.0), 5.0)
    assert c(2.0) == 4.0
    with pytest.raises(RateBoundError):
        c.evaluate(np.array([3.0]))
    with pytest.raises(RateBoundError):
        RateFunction.on_states([-1.0, 0.5])
    logger.info("✓ rate bounds are enforced")


def test_cemetery_has_zero_rate():
    assert RATES.evaluate(np.array([DEAD_INDEX, 2])).tolist() == [0.0, 3.0]
    logger.info("✓ cemetery has zero rate")


def test_multiplicative_functional():
    m = mf_from_af(additive_trace(staircase(), RATES))
    assert m.value_at(0.0) == 1.0
    assert m.value_at(3.0) == pytest.approx(math.exp(-6.0))
    assert ls_increment(m, 0.0, 3.0) == pytest.approx(1.0 - math.exp(-6.0))
    with pytest.raises(ValueError):
        ls_increment(m, 1.0, 1.0)
    logger.info("✓ multiplicative functional")


def test_indicator_functional():
    m = IndicatorMfTrace(1.5, 3.0)
    assert m.value_at(1.0) == 1.0
    assert m.value_at(1.5) == 0.0
    assert ls_increment(m, 1.0, 2.0) == 1.0
    frame = IndicatorMfTrace(Censored(3.0), 3.0).to_frame()
    assert frame['value'].tolist() == [1.0, 1.0]
    logger.info("✓ indicator functional")


def test_af_trace_validation():
    with pytest.raises(ValueError):
        AfTrace(np.array([0.0, 1.0]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        AfTrace(np.array([0.0, 1.0]), np.array([0.0, -1.0]))
    logger.info("✓ af trace validation")


def test_hitting_times_on_jump_paths():
    p = staircase()
    assert hitting_time(p, HitClosedSet(states={2})) == 2.0
    assert hitting_time(p, HitClosedSet(states={0})) == 0.0
    miss = hitting_time(p, HitClosedSet(states={5}))
    assert is_censored(miss)
    assert lifetime_value(miss) == math.inf
    logger.info("✓ hitting times on jump paths")


def test_hitting_time_on_grid_path():
    p = GridPath(0.1, np.array([0.0, 0.5, 1.2, 0.3]))
    assert hitting_time(p, HitClosedSet(intervals=[(1.0, 2.0)])) == pytest.approx(0.2)
    logger.info("✓ hitting time on grid path")


@pytest.mark.parametrize('rule', [HitClosedSet(states={2}), Deterministic(2.0)])
def test_terminal_identity_under_shift(rule):
    p = staircase()
    assert terminal_time(p, rule) == 2.0
    for s in [0.0, 0.5, 1.0, 1.75, 2.5]:
        assert terminal_identity_holds(p, rule, s)
    logger.info("✓ terminal identity under shift")


def test_deterministic_rule():
    with pytest.raises(ValueError):
        Deterministic(-1.0)
    assert is_censored(terminal_time(staircase(), Deterministic(4.0)))
    assert mf_terminal(staircase(), Deterministic(2.0)).value_at(2.0) == 0.0
    logger.info("✓ deterministic rule")


def test_path_lifetime_on_killed_jump_path():
    p = JumpPath(np.array([0.0, 1.0, 1.5]), np.array([0, 1, DEAD_INDEX]), 3.0, TAG)
    assert path_lifetime(p) == 1.5
    assert is_censored(path_lifetime(staircase()))
    logger.info("✓ path lifetime on killed jump path")
