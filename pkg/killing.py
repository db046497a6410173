"""
Killed processes: sampling of lifetimes and killed paths, Monte Carlo and exact
killed semigroups, the joint law of lifetime and exit point, and generator
limit checks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Optional, Sequence, Union

import numpy as np
from scipy import integrate

from config import GENERATOR_STEPS, SLOPE_BAND, TOLERANCES
from errors import ConfigurationError, DegenerateInputError, EstimatorAbortError, PathDomainError
from extended_state import DEAD, ExtState, SubKernel
from functionals import (Deterministic, HitClosedSet, Lifetime, MfTrace, RateFunction,
                         TerminalRule, additive_trace, is_censored, mf_from_af, mf_terminal, terminal_time)
from process_models import (DEAD_INDEX, GridPath, JumpPath, Model, Path, RateModel, RngLike,
                            RngStream, as_generator, ctmc_semigroup_exact, first_grid_index, path_left_limit,
                            sample_ctmc_path, sample_path, sample_sde_paths, uniformized_exponential)
from verification import (EstimatorReport, FitResult, SlopeReport, chi_square, fit_slope, independence_test,
                          merge_reports, raise_slope_failure, run_chunks)

logger = logging.getLogger(__name__)

WEIGHTED = 'weighted'
HARD = 'hard'
MODES = (WEIGHTED, HARD)
SNAP = TOLERANCES['grid_snap']


# ---------------------------------------------------------------------------
# Kill specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpRate:
    """Kill when the additive functional of c crosses an independent Exp(1) level."""

    c: RateFunction


@dataclass(frozen=True)
class Terminal:
    """Kill at a terminal time of the base path."""

    rule: TerminalRule


KillRule = Union[ExpRate, Terminal]


@dataclass(frozen=True, eq=False)
class KillSpec:
    model: Model
    rule: KillRule

    def __post_init__(self):
        finite = isinstance(self.model, RateModel)
        if isinstance(self.rule, ExpRate):
            c = self.rule.c
            if finite and (not c.is_finite or c.values.size != self.model.size):
                raise ConfigurationError(f"rate vector does not match a chain with {self.model.size} states")
            if finite and c.tag is not None and c.tag.id != self.model.tag.id:
                raise ConfigurationError(f"rate tag {c.tag.id} does not match model tag {self.model.tag.id}")
            if not finite and c.is_finite:
                raise ConfigurationError("diffusion blocks need a rate function on the line")
        elif isinstance(self.rule.rule, HitClosedSet):
            target = self.rule.rule
            if finite and (target.intervals or any(not 0 <= s < self.model.size for s in target.states)):
                raise ConfigurationError(f"target {sorted(target.states)} is not a subset of the chain's states")
            if not finite and target.states:
                raise ConfigurationError("diffusion targets are unions of closed intervals")

    @property
    def is_finite(self) -> bool:
        return isinstance(self.model, RateModel)

    @property
    def rates(self) -> Optional[np.ndarray]:
        """Killing-rate vector for finite ExpRate specs."""
        if isinstance(self.rule, ExpRate) and self.rule.c.is_finite:
            return np.asarray(self.rule.c.values)
        return None


@dataclass(frozen=True, eq=False)
class KilledSample:
    """A base path with its lifetime and the killed path it induces.

    ``exit_point`` is the left limit at the lifetime (Dead only for a zero
    lifetime, None when the lifetime is censored).
    """

    base: Path
    lifetime: Lifetime
    killed: Path
    exit_point: Optional[ExtState]
    weight: MfTrace


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _split_streams(rng: RngLike):
    """Independent path / clock generators from a stream; one shared generator otherwise."""
    if isinstance(rng, RngStream):
        return rng.sub(0).generator(), rng.sub(1).generator()
    gen = as_generator(rng)
    return gen, gen


def sample_lifetime_exp_clock(p: Path, c: RateFunction, rng: RngLike) -> Lifetime:
    """
    tau = inf{t : A_t >= E} with E ~ Exp(1) drawn from ``rng``.

    Args:
        p: Base path
        c: Killing rate
        rng: Clock stream, independent of the one that produced ``p``

    Returns:
        Lifetime, or Censored when A_horizon < E
    """
    level = as_generator(rng).exponential()
    return additive_trace(p, c).first_passage(level)


def kill_path(p: Path, tau: Lifetime) -> Path:
    """Send p to the cemetery from time tau on."""
    if is_censored(tau):
        return p
    if tau < 0.0 or tau > p.horizon * (1.0 + 1e-12):
        raise PathDomainError(f"lifetime {tau} outside [0, {p.horizon}]")
    if isinstance(p, JumpPath):
        absolute = p.origin + tau
        keep = p.times < absolute
        times = np.append(p.times[keep], absolute)
        states = np.append(p.states[keep], DEAD_INDEX)
        if not keep.any():
            times, states = np.array([p.origin]), np.array([DEAD_INDEX])
        return JumpPath(times, states, p.end, p.tag, p.origin)
    if isinstance(p, GridPath):
        death = p.origin + tau
        values = np.array(p.values)
        values[max(first_grid_index(death, p.dt), p.start):] = np.nan
        return GridPath(p.dt, values, p.tag, death, p.start)
    raise TypeError(f"cannot kill a {type(p).__name__}")


def exit_point(base: Path, tau: Lifetime) -> Optional[ExtState]:
    """X_{tau-} of the base path."""
    if is_censored(tau):
        return None
    if tau <= 0.0:
        return DEAD
    return path_left_limit(base, tau)


def sample_killed(spec: KillSpec, x0, horizon: float, rng: RngLike) -> KilledSample:
    """
    Sample (base path, lifetime) and the killed path on [0, horizon].

    Args:
        spec: Kill specification
        x0: Initial state index or real
        horizon: Observation window
        rng: Stream address; lane 0 drives the path, lane 1 the Exp(1) clock

    Returns:
        KilledSample
    """
    path_gen, clock_gen = _split_streams(rng)
    base = sample_path(spec.model, x0, horizon, path_gen)
    if isinstance(spec.rule, ExpRate):
        trace = additive_trace(base, spec.rule.c)
        tau = trace.first_passage(clock_gen.exponential())
        weight = mf_from_af(trace)
    else:
        tau = terminal_time(base, spec.rule.rule)
        weight = mf_terminal(base, spec.rule.rule)
    return KilledSample(base, tau, kill_path(base, tau), exit_point(base, tau), weight)


# ---------------------------------------------------------------------------
# Monte Carlo killed semigroup
# ---------------------------------------------------------------------------

def _finite_f(f, size: int) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != (size,):
        raise ValueError(f"test function of shape {f.shape} for {size} states")
    if not np.all(np.isfinite(f)):
        bad = f[~np.isfinite(f)][0]
        logger.error(f"test function is unbounded: {bad}")
        raise EstimatorAbortError(float(bad), 0)
    return f


def _ctmc_chunk(spec: KillSpec, x0: int, times: tuple, fs: tuple, count: int, stream: RngStream) -> np.ndarray:
    """Per-replication (weighted, hard) integrands, shape (count, len(times), len(fs), 2)."""
    path_gen, clock_gen = stream.sub(0).generator(), stream.sub(1).generator()
    horizon = max(times)
    fmat = np.array(fs)
    out = np.empty((count, len(times), len(fs), 2))
    for r in range(count):
        base = sample_ctmc_path(spec.model, x0, horizon, path_gen)
        states = np.array([base.states[base.index_at(t)] for t in times])
        values = fmat[:, states].T
        if isinstance(spec.rule, ExpRate):
            trace = additive_trace(base, spec.rule.c)
            level = clock_gen.exponential()
            af = np.array([trace.value_at(t) for t in times])
            weight = np.exp(-af)
            alive = (af < level).astype(float)
        else:
            tau = terminal_time(base, spec.rule.rule)
            end = math.inf if is_censored(tau) else tau
            weight = alive = np.array([1.0 if t < end else 0.0 for t in times])
        out[r, :, :, 0] = weight[:, None] * values
        out[r, :, :, 1] = alive[:, None] * values
    return out


def _grid_hits(paths: np.ndarray, rule: TerminalRule, dt: float) -> np.ndarray:
    """Terminal times per ensemble row (inf when not reached)."""
    if isinstance(rule, Deterministic):
        return np.full(paths.shape[0], rule.time)
    mask = rule.contains_points(paths)
    first = np.argmax(mask, axis=1)
    return np.where(mask.any(axis=1), first * dt, math.inf)


def _sde_chunk(spec: KillSpec, x0: float, times: tuple, fs: tuple, count: int, stream: RngStream) -> np.ndarray:
    """Vectorized Euler-Maruyama version of ``_ctmc_chunk``."""
    m = spec.model
    paths = sample_sde_paths(m, x0, max(times), stream.sub(0), count)
    cells = [min(int(math.floor(t / m.dt + SNAP)), paths.shape[1] - 1) for t in times]
    out = np.empty((count, len(times), len(fs), 2))
    if isinstance(spec.rule, ExpRate):
        rates = spec.rule.c.evaluate(paths[:, :-1])
        af = np.concatenate([np.zeros((count, 1)), np.cumsum(rates * m.dt, axis=1)], axis=1)
        levels = stream.sub(1).generator().exponential(size=count)
    else:
        taus = _grid_hits(paths, spec.rule.rule, m.dt)
    for i, (t, k) in enumerate(zip(times, cells)):
        if isinstance(spec.rule, ExpRate):
            a_t = af[:, k] + (rates[:, k] * max(t - k * m.dt, 0.0) if k < rates.shape[1] else 0.0)
            weight = np.exp(-a_t)
            alive = (a_t < levels).astype(float)
        else:
            weight = alive = (t < taus).astype(float)
        for j, f in enumerate(fs):
            values = np.asarray(f(paths[:, k]), dtype=float)
            out[:, i, j, 0] = weight * values
            out[:, i, j, 1] = np.where(alive > 0.0, values, 0.0)
    return out


def killed_semigroup_mc_grid(spec: KillSpec, fs: Sequence, times: Sequence[float], x0, n: int,
                             rng: RngStream, key: str = 'kill-semigroup', jobs: int = 1) -> dict:
    """
    Weighted and Hard estimates of (Q_t f)(x0) for every (t, f) from one set of paths.

    Args:
        spec: Kill specification
        fs: Test functions (vectors for chains, vectorized callables for diffusions)
        times: Evaluation times
        x0: Initial state
        n: Replications (n >= 2)
        rng: Base stream
        key: Report key prefix
        jobs: Worker processes

    Returns:
        {(i, j, mode): EstimatorReport} for times[i], fs[j]
    """
    if n < 2:
        raise ValueError(f"need at least two replications, got {n}")
    times = tuple(float(t) for t in times)
    if spec.is_finite:
        fs = tuple(_finite_f(f, spec.model.size) for f in fs)
        worker = partial(_ctmc_chunk, spec, int(x0), times, fs)
    else:
        fs = tuple(fs)
        worker = partial(_sde_chunk, spec, float(x0), times, fs)
    outputs = run_chunks(worker, n, rng, jobs)
    reports = {}
    offset = 0
    for c, block in enumerate(outputs):
        stream = rng.offset(c).stream_id
        for i in range(len(times)):
            for j in range(len(fs)):
                for mode_index, mode in enumerate(MODES):
                    name = f"{key}:t={times[i]}:f={j}:{mode}"
                    part = EstimatorReport.from_samples(name, block[:, i, j, mode_index], rng.master_seed,
                                                        stream, offset)
                    previous = reports.get((i, j, mode), EstimatorReport.empty(name))
                    reports[(i, j, mode)] = merge_reports(previous, part)
        offset += block.shape[0]
    logger.info(f"{key}: {n} killed replications at {len(times)} times")
    return reports


def killed_semigroup_mc(spec: KillSpec, f, t: float, x0, n: int, mode: str, rng: RngStream,
                        jobs: int = 1) -> EstimatorReport:
    """Monte Carlo estimate of (Q_t f)(x0) in Weighted (E[M_t f(X_t)]) or Hard (E[f(X~_t)]) mode."""
    if mode not in MODES:
        raise ValueError(f"unknown estimator mode {mode!r}")
    return killed_semigroup_mc_grid(spec, [f], [t], x0, n, rng, jobs=jobs)[(0, 0, mode)]


# ---------------------------------------------------------------------------
# Exact oracles (finite state)
# ---------------------------------------------------------------------------

def terminal_semigroup_exact(m: RateModel, rule: TerminalRule, t: float) -> SubKernel:
    """
    Q_t for killing at a terminal rule on a chain.

    HitClosedSet(B) gives the taboo semigroup: exp(t L) restricted to E \\ B,
    zero rows on B. Deterministic(t0) gives K_t for t < t0 and 0 afterwards.
    """
    n = m.size
    if isinstance(rule, Deterministic):
        if t < rule.time:
            return ctmc_semigroup_exact(m, None, t)
        return SubKernel(np.zeros((n, n)), m.tag)
    keep = np.array([x for x in range(n) if x not in rule.states], dtype=int)
    matrix = np.zeros((n, n))
    if keep.size:
        block = uniformized_exponential(m.L[np.ix_(keep, keep)], t)
        matrix[np.ix_(keep, keep)] = np.clip(block, 0.0, 1.0)
    return SubKernel(matrix, m.tag)


def killed_semigroup_exact(spec: KillSpec, t: float) -> SubKernel:
    """Q_t = e^{t(L - diag c)} for ExpRate chains; the taboo / deterministic oracle for Terminal rules."""
    if not spec.is_finite:
        raise TypeError("exact killed semigroups are available for finite chains only")
    if isinstance(spec.rule, ExpRate):
        return ctmc_semigroup_exact(spec.model, spec.rates, t)
    return terminal_semigroup_exact(spec.model, spec.rule.rule, t)


def survival_exact(spec: KillSpec, t: float) -> np.ndarray:
    """P_x(lifetime > t) = (Q_t 1)(x) for every start x."""
    return killed_semigroup_exact(spec, t).mass()


# ---------------------------------------------------------------------------
# Lifetime / exit-point joint law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExitJointReport:
    """Histogram of (lifetime bin, exit state) plus the censored cell, with its oracle."""

    edges: tuple
    counts: np.ndarray
    censored: int
    oracle: np.ndarray
    oracle_censored: float
    test: FitResult

    @property
    def n(self) -> int:
        return int(self.counts.sum() + self.censored)

    def to_rows(self) -> list:
        """(bin_lo, bin_hi, state, empirical, oracle, z) rows; state None marks the censored cell."""
        rows = []
        n = self.n
        cells = [(k, y) for k in range(self.counts.shape[0]) for y in range(self.counts.shape[1])]
        for k, y in cells:
            rows.append(self._row(self.edges[k], self.edges[k + 1], y, self.counts[k, y], self.oracle[k, y], n))
        rows.append(self._row(self.edges[-1], math.inf, None, self.censored, self.oracle_censored, n))
        return rows

    @staticmethod
    def _row(lo, hi, state, count, prob, n) -> dict:
        empirical = count / n
        spread = math.sqrt(prob * (1.0 - prob) / n) if 0.0 < prob < 1.0 else 0.0
        z = (empirical - prob) / spread if spread > 0.0 else 0.0
        return {'bin_lo': lo, 'bin_hi': hi, 'state': state, 'empirical': empirical, 'oracle': prob, 'z': z}


def exit_joint_oracle(m: RateModel, c, x0: int, edges: Sequence[float]):
    """
    P(lifetime in I_k, exit state = y) = int_{I_k} (Q_s)_{x0, y} c(y) ds by adaptive quadrature.

    Returns:
        (matrix over bins x states, censored mass P(lifetime >= edges[-1]))
    """
    c = np.asarray(c, dtype=float)
    generator = m.L - np.diag(c)

    def density(s):
        return uniformized_exponential(generator, s)[x0] * c

    tol = TOLERANCES['exit_quadrature']
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        value, _ = integrate.quad_vec(density, lo, hi, epsabs=tol, epsrel=TOLERANCES['quadrature'])
        rows.append(np.maximum(value, 0.0))
    survival = float(uniformized_exponential(generator, edges[-1])[x0].sum())
    return np.array(rows), max(survival, 0.0)


def _exit_chunk(spec: KillSpec, x0: int, horizon: float, count: int, stream: RngStream) -> np.ndarray:
    """(lifetime or inf, exit state or -1) per replication."""
    path_gen, clock_gen = stream.sub(0).generator(), stream.sub(1).generator()
    out = np.empty((count, 2))
    for r in range(count):
        base = sample_ctmc_path(spec.model, x0, horizon, path_gen)
        tau = additive_trace(base, spec.rule.c).first_passage(clock_gen.exponential())
        if is_censored(tau):
            out[r] = (math.inf, -1)
        else:
            state = path_left_limit(base, tau) if tau > 0.0 else DEAD
            out[r] = (tau, -1 if state is DEAD else state.point)
    return out


def sample_exits(spec: KillSpec, x0: int, horizon: float, n: int, rng: RngStream, jobs: int = 1):
    """
    Lifetimes and exit states of n killed chains.

    Returns:
        (lifetimes with inf for censored runs, exit states with DEAD_INDEX when there is none)
    """
    if not spec.is_finite or not isinstance(spec.rule, ExpRate):
        raise TypeError("exit sampling needs a finite chain killed at a rate")
    outputs = run_chunks(partial(_exit_chunk, spec, int(x0), float(horizon)), n, rng, jobs)
    samples = np.concatenate(outputs, axis=0)
    return samples[:, 0], samples[:, 1].astype(int)


def exit_joint_histogram(spec: KillSpec, x0: int, n: int, edges: Sequence[float], rng: RngStream,
                         jobs: int = 1) -> ExitJointReport:
    """
    Empirical joint law of (lifetime, exit point) against the quadrature oracle.

    Args:
        spec: Finite ExpRate kill specification
        x0: Initial state
        n: Replications
        edges: Bin edges 0 = e_0 < ... < e_K; lifetimes beyond e_K are censored
        rng: Base stream
        jobs: Worker processes

    Returns:
        ExitJointReport with a chi-square test over all cells
    """
    edges = tuple(float(e) for e in edges)
    if len(edges) < 2:
        raise DegenerateInputError("exit histogram needs at least one time bin")
    if edges[0] != 0.0 or any(b <= a for a, b in zip(edges[:-1], edges[1:])):
        raise DegenerateInputError(f"bin edges must start at 0 and increase, got {edges}")
    if not spec.is_finite or not isinstance(spec.rule, ExpRate):
        raise TypeError("the exit-point oracle needs a finite chain killed at a rate")
    taus, states = sample_exits(spec, x0, edges[-1], n, rng, jobs)
    alive = np.isfinite(taus) & (taus < edges[-1])
    counts = np.zeros((len(edges) - 1, spec.model.size))
    bins = np.searchsorted(edges, taus[alive], side='right') - 1
    np.add.at(counts, (bins, states[alive]), 1.0)
    censored = int(n - counts.sum())
    oracle, oracle_censored = exit_joint_oracle(spec.model, spec.rates, int(x0), edges)
    probs = np.append(oracle.ravel(), oracle_censored)
    probs = probs / probs.sum()
    test = chi_square(np.append(counts.ravel(), censored), probs)
    logger.info(f"exit joint law: chi-square {test.statistic:.3f}, p = {test.pvalue:.4f}")
    return ExitJointReport(edges, counts, censored, oracle, oracle_censored, test)


# ---------------------------------------------------------------------------
# Generator checks
# ---------------------------------------------------------------------------


def killed_generator_check(spec: KillSpec, f, x0: Optional[int] = None, steps: Sequence[float] = GENERATOR_STEPS,
                           raise_on_fail: bool = False) -> SlopeReport:
    """
    Fit the decay of d_h = (Q_h f - f)/h - (L - diag c) f as h -> 0.

    Args:
        spec: Finite kill specification (ExpRate)
        f: Test vector
        x0: Evaluate at one state, or the sup norm over all states when None
        steps: Step sizes h
        raise_on_fail: Raise TheoremCheckFailure when the slope leaves the band

    Returns:
        SlopeReport over (h, error)
    """
    if not spec.is_finite or not isinstance(spec.rule, ExpRate):
        raise TypeError("the killed generator check needs a finite chain killed at a rate")
    f = _finite_f(f, spec.model.size)
    limit = (spec.model.L - np.diag(spec.rates)) @ f
    points = []
    for h in steps:
        d = (killed_semigroup_exact(spec, h).matrix @ f - f) / h - limit
        points.append((h, float(abs(d[x0])) if x0 is not None else float(np.max(np.abs(d)))))
    report = fit_slope(points, exact_tol=TOLERANCES['semigroup'])
    if raise_on_fail and not report.passed:
        raise_slope_failure('killed generator', report)
    return report


@dataclass(frozen=True)
class MfDerivativeReport:
    """Right derivative of E_x[M_t] at 0 against -c(x)."""

    state: int
    rate: float
    extrapolated: float
    slope: SlopeReport

    @property
    def passed(self) -> bool:
        """Extrapolated derivative matches -c(x) and the forward differences converge at first order or faster."""
        close = abs(self.extrapolated + self.rate) <= TOLERANCES['extrapolation']
        return close and (self.slope.passed or self.slope.slope > SLOPE_BAND[1])

    def to_dict(self) -> dict:
        return {'state': self.state, 'rate': self.rate, 'extrapolated': self.extrapolated,
                'passed': self.passed, 'slope': self.slope.to_dict()}


def mf_derivative_check(spec: KillSpec, x0: int, steps: Sequence[float] = GENERATOR_STEPS) -> MfDerivativeReport:
    """
    d/dt E_x[M_t] at 0+ equals -c(x).

    Forward differences (E_x[M_h] - 1)/h converge at first order; the h, h/2
    Richardson value at the smallest step is reported as the derivative estimate.
    """
    rate = float(spec.rates[x0])

    def difference(h):
        return (survival_exact(spec, h)[x0] - 1.0) / h

    points = [(h, abs(difference(h) + rate)) for h in steps]
    h = min(steps)
    extrapolated = 2.0 * difference(h / 2.0) - difference(h)
    return MfDerivativeReport(int(x0), rate, float(extrapolated),
                              fit_slope(points, exact_tol=TOLERANCES['semigroup']))


# ---------------------------------------------------------------------------
# Markov property of the killed chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarkovTestReport:
    """Law of the future given the present, stratified by a past observation."""

    present: int
    table: np.ndarray
    test: FitResult

    def to_dict(self) -> dict:
        return {'present': self.present, 'table': self.table.tolist(), **self.test.to_dict()}


def _killed_states_chunk(spec: KillSpec, x0: int, times: tuple, count: int, stream: RngStream) -> np.ndarray:
    """Killed-chain states (DEAD_INDEX for the cemetery) at each observation time."""
    horizon = max(times)
    out = np.empty((count, len(times)), dtype=int)
    for r in range(count):
        sample = sample_killed(spec, x0, horizon, stream.sub(r))
        out[r] = [sample.killed.states[sample.killed.index_at(t)] for t in times]
    return out


def markov_stratification(history: np.ndarray, present: np.ndarray, future: np.ndarray, size: int,
                          y: Optional[int] = None) -> MarkovTestReport:
    """
    Independence of X_{s+t} from X_u (u < s) given X_s = y.

    States are coded 0..size-1 with DEAD_INDEX for the cemetery; the cemetery
    becomes the last outcome column. ``y`` defaults to the most frequent alive
    present state.
    """
    alive = present != DEAD_INDEX
    if y is None:
        if not alive.any():
            raise DegenerateInputError("no alive samples at the present time")
        y = int(np.bincount(present[alive], minlength=size).argmax())
    chosen = present == y
    strata = np.where(history[chosen] == DEAD_INDEX, size, history[chosen])
    outcomes = np.where(future[chosen] == DEAD_INDEX, size, future[chosen])
    table = np.zeros((size + 1, size + 1))
    np.add.at(table, (strata, outcomes), 1.0)
    return MarkovTestReport(int(y), table, independence_test(table))


def killed_markov_test(spec: KillSpec, x0: int, u: float, s: float, t: float, n: int, rng: RngStream,
                       y: Optional[int] = None, jobs: int = 1) -> MarkovTestReport:
    """Stratification test of the Markov property for a killed chain observed at u < s < s + t."""
    if not 0.0 < u < s or t <= 0.0:
        raise ValueError(f"need 0 < u < s and t > 0, got u={u}, s={s}, t={t}")
    worker = partial(_killed_states_chunk, spec, int(x0), (u, s, s + t))
    states = np.concatenate(run_chunks(worker, n, rng, jobs), axis=0)
    report = markov_stratification(states[:, 0], states[:, 1], states[:, 2], spec.model.size, y)
    logger.info(f"killed Markov test at y={report.present}: p = {report.test.pvalue:.4f}")
    return report
