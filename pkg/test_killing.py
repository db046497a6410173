"""
Tests for killed chains and diffusions: sampling, semigroups, exit laws and generator limits
"""

import logging
import math

import numpy as np
import pytest
from scipy import stats

from errors import ConfigurationError, PathDomainError
from extended_state import DEAD, Alive, StateSpaceTag
from functionals import (Censored, ConstantRate, Deterministic, HitClosedSet, RateFunction, is_censored,
                         path_lifetime)
from killing import (
    HARD,
    WEIGHTED,
    ExpRate,
    KillSpec,
    Terminal,
    exit_joint_histogram,
    exit_joint_oracle,
    exit_point,
    kill_path,
    killed_generator_check,
    killed_markov_test,
    killed_semigroup_exact,
    killed_semigroup_mc,
    killed_semigroup_mc_grid,
    mf_derivative_check,
    sample_exits,
    sample_killed,
    sample_lifetime_exp_clock,
    survival_exact,
    terminal_semigroup_exact,
)
from killing import _sde_chunk
from process_models import (GridPath, JumpPath, RateModel, RngStream, ctmc_semigroup_exact, ou_model, path_eval,
                            sample_sde_path)
from verification import within_stderr

logger = logging.getLogger(__name__)

TAG = StateSpaceTag(0, 3)
MODEL = RateModel(np.array([[-1.0, 0.6, 0.4], [0.5, -1.2, 0.7], [0.3, 0.9, -1.2]]), TAG)
SPEC = KillSpec(MODEL, ExpRate(RateFunction.on_states([0.0, 0.5, 2.0], TAG)))
BASIS = [np.eye(3)[i] for i in range(3)] + [np.ones(3)]


def staircase() -> JumpPath:
    return JumpPath(np.array([0.0, 1.0, 2.0]), np.array([0, 1, 2]), 3.0, TAG)


def test_kill_jump_path():
    killed = kill_path(staircase(), 1.5)
    assert killed.times.tolist() == [0.0, 1.0, 1.5]
    assert path_eval(killed, 1.2) == Alive(TAG, 1)
    assert path_eval(killed, 1.5) is DEAD
    assert path_eval(killed, 3.0) is DEAD
    assert path_lifetime(killed) == 1.5
    assert exit_point(staircase(), 1.5) == Alive(TAG, 1)
    assert exit_point(staircase(), 2.0) == Alive(TAG, 1)
    logger.info("✓ kill jump path")


def test_kill_at_zero_and_censored():
    assert path_lifetime(kill_path(staircase(), 0.0)) == 0.0
    assert exit_point(staircase(), 0.0) is DEAD
    assert kill_path(staircase(), Censored(3.0)) == staircase()
    assert exit_point(staircase(), Censored(3.0)) is None
    with pytest.raises(PathDomainError):
        kill_path(staircase(), 4.0)
    logger.info("✓ kill at zero and censored")


def test_kill_grid_path_between_cells():
    p = GridPath(0.1, np.array([0.0, 1.0, 2.0, 3.0, 4.0]))
    killed = kill_path(p, 0.25)
    assert np.isnan(killed.values[3:]).all()
    assert path_eval(killed, 0.2) == Alive(p.tag, 2.0)
    assert path_eval(killed, 0.25) is DEAD
    assert path_lifetime(killed) == pytest.approx(0.25)
    logger.info("✓ kill grid path between cells")


def test_kill_spec_validation():
    with pytest.raises(ConfigurationError):
        KillSpec(MODEL, ExpRate(RateFunction.on_states([1.0, 2.0])))
    with pytest.raises(ConfigurationError):
        KillSpec(MODEL, Terminal(HitClosedSet(states={4})))
    with pytest.raises(ConfigurationError):
        KillSpec(ou_model(1.0, 0.5, 1e-2), ExpRate(RateFunction.on_states([1.0])))
    logger.info("✓ kill spec validation")


def test_zero_rate_never_kills():
    spec = KillSpec(MODEL, ExpRate(RateFunction.on_states([0.0, 0.0, 0.0], TAG)))
    sample = sample_killed(spec, 0, 5.0, RngStream(2))
    assert is_censored(sample.lifetime)
    assert sample.killed == sample.base
    assert sample.weight.value_at(5.0) == 1.0
    logger.info("✓ zero rate never kills")


def test_sample_killed_consistency():
    for r in range(50):
        sample = sample_killed(SPEC, 1, 10.0, RngStream(3, r))
        if is_censored(sample.lifetime):
            continue
        tau = sample.lifetime
        assert path_lifetime(sample.killed) == pytest.approx(tau)
        assert sample.exit_point == path_eval(sample.base, tau) or tau in sample.base.times
        assert sample.weight.value_at(tau) < 1.0 or tau == 0.0
    logger.info("✓ sample killed consistency")


def test_exact_oracles():
    survival = survival_exact(SPEC, 1.0)
    q = killed_semigroup_exact(SPEC, 1.0)
    assert np.allclose(q.mass(), survival)
    assert np.all(survival < 1.0)
    zero = KillSpec(MODEL, ExpRate(RateFunction.on_states([0.0, 0.0, 0.0], TAG)))
    assert np.allclose(killed_semigroup_exact(zero, 1.0).matrix, ctmc_semigroup_exact(MODEL, None, 1.0).matrix)
    logger.info("✓ exact oracles")


def test_taboo_and_deterministic_oracles():
    taboo = terminal_semigroup_exact(MODEL, HitClosedSet(states={2}), 1.0)
    assert np.all(taboo.matrix[2] == 0.0)
    assert np.all(taboo.matrix[:, 2] == 0.0)
    assert np.all(taboo.mass() < 1.0)
    before = terminal_semigroup_exact(MODEL, Deterministic(2.0), 1.0)
    assert np.allclose(before.matrix, ctmc_semigroup_exact(MODEL, None, 1.0).matrix)
    after = terminal_semigroup_exact(MODEL, Deterministic(2.0), 2.0)
    assert np.all(after.matrix == 0.0)
    logger.info("✓ taboo and deterministic oracles")


def test_weighted_and_hard_estimators_match_exact():
    times = [0.5, 1.0]
    reports = killed_semigroup_mc_grid(SPEC, BASIS, times, 0, 20000, RngStream(20240611, 1))
    for i, t in enumerate(times):
        exact = killed_semigroup_exact(SPEC, t).matrix[0]
        for j, f in enumerate(BASIS):
            target = float(exact @ f)
            for mode in (WEIGHTED, HARD):
                report = reports[(i, j, mode)]
                assert report.n == 20000
                assert within_stderr(report, target, multiple=4.0, floor=1e-9), (t, j, mode, report.mean, target)
    # weights carry less variance than indicators
    assert reports[(1, 3, WEIGHTED)].stderr < reports[(1, 3, HARD)].stderr
    logger.info("✓ weighted and hard estimators match exact")


def test_hitting_time_kill_matches_taboo_semigroup():
    spec = KillSpec(MODEL, Terminal(HitClosedSet(states={2})))
    report = killed_semigroup_mc(spec, np.ones(3), 1.0, 0, 20000, HARD, RngStream(20240611, 2))
    target = float(terminal_semigroup_exact(MODEL, HitClosedSet(states={2}), 1.0).mass()[0])
    assert within_stderr(report, target, multiple=4.0)
    logger.info("✓ hitting time kill matches taboo semigroup")


def test_estimates_do_not_depend_on_jobs():
    one = killed_semigroup_mc(SPEC, np.ones(3), 1.0, 1, 3000, WEIGHTED, RngStream(5, 7), jobs=1)
    two = killed_semigroup_mc(SPEC, np.ones(3), 1.0, 1, 3000, WEIGHTED, RngStream(5, 7), jobs=2)
    assert one.mean == two.mean
    assert one.m2 == two.m2
    assert one.streams == (7, 8)
    logger.info("✓ estimates do not depend on jobs")


def test_diffusion_constant_rate_survival():
    model = ou_model(1.0, 0.5, 1e-2)
    spec = KillSpec(model, ExpRate(RateFunction.on_line(ConstantRate(0.7), 0.7)))
    report = killed_semigroup_mc(spec, lambda x: np.ones_like(x), 1.0, 0.0, 10000, WEIGHTED, RngStream(8))
    # left-endpoint sums of a constant rate are exact on the grid
    assert report.mean == pytest.approx(math.exp(-0.7), abs=1e-12)
    logger.info("✓ diffusion constant rate survival")


def test_exit_oracle_is_a_probability_law():
    oracle, censored = exit_joint_oracle(MODEL, SPEC.rates, 0, [0.0, 0.5, 1.0, 2.0, 4.0])
    assert oracle.shape == (4, 3)
    assert np.all(oracle[:, 0] == 0.0)
    assert oracle.sum() + censored == pytest.approx(1.0, abs=1e-7)
    assert censored == pytest.approx(survival_exact(SPEC, 4.0)[0])
    logger.info("✓ exit oracle is a probability law")


def test_exit_states_have_positive_rate():
    taus, states = sample_exits(SPEC, 0, 4.0, 500, RngStream(6))
    finite = np.isfinite(taus)
    assert finite.any()
    assert np.all(np.isin(states[finite], [1, 2]))
    assert np.all(states[~finite] == -1)
    logger.info("✓ exit states have positive rate")


def test_exit_joint_histogram():
    report = exit_joint_histogram(SPEC, 0, 20000, [0.0, 0.5, 1.0, 2.0, 4.0], RngStream(20240611, 3))
    assert report.n == 20000
    assert report.test.passed()
    rows = report.to_rows()
    assert len(rows) == 4 * 3 + 1
    assert rows[-1]['state'] is None
    logger.info("✓ exit joint histogram")


def test_killed_generator_slope():
    report = killed_generator_check(SPEC, [1.0, 2.0, 3.0], raise_on_fail=True)
    assert report.passed
    assert 0.8 <= report.slope <= 1.2
    logger.info("✓ killed generator slope")


@pytest.mark.parametrize('x0', [0, 1, 2])
def test_mf_derivative(x0):
    report = mf_derivative_check(SPEC, x0)
    assert report.passed
    assert report.extrapolated == pytest.approx(-SPEC.rates[x0], abs=1e-3)
    logger.info("✓ mf derivative")


def test_killed_markov_property():
    report = killed_markov_test(SPEC, 0, 0.5, 1.0, 0.5, 6000, RngStream(20240611, 4))
    assert report.table.sum() > 0
    assert report.test.passed()
    logger.info("✓ killed markov property")


def test_exp_clock_lifetime_inverts_the_additive_functional():
    flat = RateFunction.on_states([2.0, 2.0, 2.0], TAG)
    level = RngStream(4).generator().exponential()
    tau = sample_lifetime_exp_clock(staircase(), flat, RngStream(4))
    if level / 2.0 < 3.0:
        assert tau == pytest.approx(level / 2.0)
    else:
        assert tau == Censored(3.0)
    logger.info("✓ exp clock lifetime inverts the additive functional")


def test_exp_clock_lifetime_is_exponential():
    long_path = JumpPath(np.array([0.0]), np.array([1]), 100.0, TAG)
    c = RateFunction.on_states([0.7, 0.7, 0.7], TAG)
    taus = np.array([sample_lifetime_exp_clock(long_path, c, RngStream(20240611, r)) for r in range(2000)])
    result = stats.kstest(taus, stats.expon(scale=1.0 / 0.7).cdf)
    assert result.pvalue > 1e-3
    logger.info("✓ exp clock lifetime is exponential")


def test_diffusion_estimator_reads_the_cell_in_force_at_t():
    model = ou_model(1.0, 0.5, 1e-2)
    spec = KillSpec(model, ExpRate(RateFunction.on_line(ConstantRate(0.7), 0.7)))
    stream = RngStream(3)
    chunk = _sde_chunk(spec, 0.5, (0.016, 0.05), (lambda x: x,), 1, stream)
    path = sample_sde_path(model, 0.5, 0.05, stream.sub(0))
    for i, t in enumerate((0.016, 0.05)):
        x = path_eval(path, t).point
        assert chunk[0, i, 0, 0] == pytest.approx(math.exp(-0.7 * t) * x, rel=1e-12)
    logger.info("✓ diffusion estimator reads the cell in force at t")
