"""
Concatenation of killed blocks through revival kernels: simulation of the
spliced process, revival-law tests, the restarts formula, exact oracles for
restore chains and two-block splices, and the invariant law of restore chains.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import integrate, linalg
from scipy.sparse.csgraph import connected_components

from config import GENERATOR_STEPS, SIMULATION_CONFIG, STATISTICS, TOLERANCES
from errors import (ConfigurationError, DegenerateInputError, InvalidKernelError, NoUniqueInvariantError,
                    TheoremCheckFailure, ZeroLifetimeError)
from extended_state import is_dead
from functionals import ConstantRate, RateFunction, additive_trace, is_censored, terminal_time
from killing import ExpRate, KillSpec, MarkovTestReport, killed_semigroup_exact, markov_stratification
from process_models import (DEAD_INDEX, DiffusionModel, GridPath, JumpPath, RateModel, RngLike, RngStream,
                            SplicedPath, append_path, as_generator, ou_variance, path_eval, path_left_limit,
                            sample_path, uniformized_exponential)
from verification import (EstimatorReport, FitResult, SlopeReport, chi_square, fit_slope, raise_slope_failure,
                          run_chunks, run_replications, two_sample_ks, within_stderr)

logger = logging.getLogger(__name__)

ROW_TOL = TOLERANCES['row_sum']


# ---------------------------------------------------------------------------
# Revival kernels
# ---------------------------------------------------------------------------

class DiracRevival:
    """Restart law concentrated on one point of the line."""

    def __init__(self, point: float):
        self.point = float(point)
        self.mean = self.point
        self.variance = 0.0

    def draw(self, gen: np.random.Generator, size: Optional[int] = None):
        if size is None:
            return self.point
        return np.full(size, self.point)


class GaussianRevival:
    """Restart law N(mean, sd^2) on the line."""

    def __init__(self, mean: float, sd: float):
        if sd < 0.0:
            raise ValueError(f"standard deviation must be nonnegative, got {sd}")
        self.mean = float(mean)
        self.sd = float(sd)
        self.variance = self.sd ** 2

    def draw(self, gen: np.random.Generator, size: Optional[int] = None):
        return gen.normal(self.mean, self.sd, size=size)


def _stochastic(matrix, what: str) -> np.ndarray:
    arr = np.array(matrix, dtype=float)
    arr.setflags(write=False)
    if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
        raise InvalidKernelError(f"{what} has negative or non-finite entries")
    deviation = np.abs(arr.sum(axis=-1) - 1.0)
    if np.max(deviation) > ROW_TOL:
        raise InvalidKernelError(f"{what} rows must sum to 1, worst deviation {np.max(deviation):.3e}")
    return arr


def _draw_index(probs: np.ndarray, gen: np.random.Generator) -> int:
    cumulative = np.cumsum(probs)
    return min(int(np.searchsorted(cumulative, gen.random() * cumulative[-1], side='right')), probs.size - 1)


@dataclass(frozen=True, eq=False)
class StateDependent:
    """mu(z, .) depending on the exit point z.

    Chains use a row-stochastic ``matrix`` (exit states x next states); diffusion
    blocks use ``sampler(z, generator)``.
    """

    matrix: Optional[np.ndarray] = None
    sampler: Optional[Callable] = None

    def __post_init__(self):
        if (self.matrix is None) == (self.sampler is None):
            raise ConfigurationError("a state-dependent revival kernel needs exactly one of matrix / sampler")
        if self.matrix is not None:
            arr = _stochastic(self.matrix, 'revival kernel')
            if arr.ndim != 2:
                raise InvalidKernelError("revival kernel must be a matrix")
            object.__setattr__(self, 'matrix', arr)

    def row(self, z: int) -> np.ndarray:
        if not 0 <= z < self.matrix.shape[0]:
            logger.error(f"no revival row for exit state {z}")
            raise ConfigurationError(f"revival kernel has no row for exit state {z}")
        return self.matrix[z]

    def draw(self, z, gen: np.random.Generator):
        if self.matrix is not None:
            return _draw_index(self.row(int(z)), gen)
        return float(self.sampler(z, gen))

    @property
    def next_size(self) -> Optional[int]:
        return None if self.matrix is None else self.matrix.shape[1]


@dataclass(frozen=True, eq=False)
class Constant:
    """Restart law mu independent of the exit point: a probability vector or a law on the line."""

    probs: Optional[np.ndarray] = None
    law: Optional[Union[DiracRevival, GaussianRevival]] = None

    def __post_init__(self):
        if (self.probs is None) == (self.law is None):
            raise ConfigurationError("a constant revival kernel needs exactly one of probs / law")
        if self.probs is not None:
            arr = _stochastic(self.probs, 'restart distribution')
            if arr.ndim != 1:
                raise InvalidKernelError("restart distribution must be a vector")
            object.__setattr__(self, 'probs', arr)

    def row(self, z: int) -> np.ndarray:
        return self.probs

    def draw(self, z, gen: np.random.Generator):
        if self.probs is not None:
            return _draw_index(self.probs, gen)
        return float(self.law.draw(gen))

    def draw_many(self, size: int, gen: np.random.Generator) -> np.ndarray:
        if self.probs is not None:
            cumulative = np.cumsum(self.probs)
            idx = np.searchsorted(cumulative, gen.random(size) * cumulative[-1], side='right')
            return np.minimum(idx, self.probs.size - 1).astype(float)
        return np.asarray(self.law.draw(gen, size), dtype=float)

    @property
    def next_size(self) -> Optional[int]:
        return None if self.probs is None else self.probs.size


RevivalKernel = Union[StateDependent, Constant]


# ---------------------------------------------------------------------------
# Specifications and samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlockSpec:
    kill: KillSpec

    @property
    def tag(self):
        return self.kill.model.tag

    @property
    def size(self) -> Optional[int]:
        return self.tag.size


@dataclass(frozen=True, eq=False)
class ConcatSpec:
    """
    Blocks spliced by revival kernels.

    Sequential mode: n blocks and n - 1 transfers, the process dies when the last
    block does. Cyclic (restore) mode: one block and one transfer reused for every
    renewal until the horizon.
    """

    blocks: tuple
    transfers: tuple
    horizon: float
    cyclic: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'blocks', tuple(self.blocks))
        object.__setattr__(self, 'transfers', tuple(self.transfers))
        if not self.horizon > 0.0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")
        if not self.blocks:
            raise ConfigurationError("a concatenation needs at least one block")
        if self.cyclic:
            if len(self.blocks) != 1 or len(self.transfers) != 1:
                raise ConfigurationError("cyclic mode takes exactly one block and one transfer")
        else:
            if len(self.transfers) != len(self.blocks) - 1:
                raise ConfigurationError(
                    f"{len(self.blocks)} blocks need {len(self.blocks) - 1} transfers, got {len(self.transfers)}")
            if len(self.blocks) > SIMULATION_CONFIG['max_blocks']:
                raise ConfigurationError(f"more than {SIMULATION_CONFIG['max_blocks']} blocks")
            for i in range(len(self.blocks) - 1):
                if self.blocks[i].tag.id == self.blocks[i + 1].tag.id:
                    raise ConfigurationError(f"blocks {i} and {i + 1} share state space {self.blocks[i].tag.id}")
        for i, mu in enumerate(self.transfers):
            self._check_transfer(i, mu)

    def _check_transfer(self, i: int, mu: RevivalKernel):
        source = self.blocks[i]
        target = self.blocks[0] if self.cyclic else self.blocks[i + 1]
        if target.size is not None and mu.next_size != target.size:
            raise ConfigurationError(f"transfer {i} revives into {mu.next_size} states, block has {target.size}")
        if target.size is None and mu.next_size is not None:
            raise ConfigurationError(f"transfer {i} must revive onto the line")
        if isinstance(mu, StateDependent) and mu.matrix is not None and mu.matrix.shape[0] != source.size:
            raise ConfigurationError(f"transfer {i} has {mu.matrix.shape[0]} rows for {source.size} exit states")

    def block(self, k: int) -> BlockSpec:
        return self.blocks[0] if self.cyclic else self.blocks[k]

    def transfer(self, k: int) -> Optional[RevivalKernel]:
        if self.cyclic:
            return self.transfers[0]
        if k < len(self.transfers):
            return self.transfers[k]
        return None

    @property
    def is_finite(self) -> bool:
        return all(b.size is not None for b in self.blocks)


@dataclass(frozen=True, eq=False)
class ConcatSample:
    """One spliced path with its renewal log.

    ``renewals[k]`` is sigma_{k+1}; ``exits[k]`` and ``revivals[k]`` are the
    points just before and at that renewal.
    """

    path: SplicedPath
    renewals: tuple
    exits: tuple
    revivals: tuple
    lifetimes: tuple

    @property
    def blocks_used(self) -> int:
        return len(self.path.blocks)

    def events_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'k': np.arange(1, len(self.renewals) + 1),
            'sigma_k': list(self.renewals),
            'exit_state': list(self.exits),
            'revival_state': list(self.revivals),
            'block_lifetime': list(self.lifetimes[:len(self.renewals)]),
        })


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def _point(state):
    return state.point


def _block_lifetime(kill: KillSpec, x0, limit: float, path_gen, clock_gen):
    """Sample a block path until its lifetime is found or ``limit`` is covered."""
    window = min(SIMULATION_CONFIG['block_window'], limit)
    if isinstance(kill.model, DiffusionModel):
        window = max(window, kill.model.dt)
    path = sample_path(kill.model, x0, window, path_gen)
    level = clock_gen.exponential() if isinstance(kill.rule, ExpRate) else None
    while True:
        if level is not None:
            tau = additive_trace(path, kill.rule.c).first_passage(level)
        else:
            tau = terminal_time(path, kill.rule.rule)
        if not is_censored(tau) or path.horizon >= limit * (1.0 - 1e-12):
            return path, tau
        extra = min(SIMULATION_CONFIG['block_window'], limit - path.horizon)
        if isinstance(path, GridPath) and extra < path.dt:
            return path, tau
        end_state = path.end_state if isinstance(path, JumpPath) else float(path.values[-1])
        path = append_path(path, sample_path(kill.model, end_state, extra, path_gen))


def simulate_concatenated(spec: ConcatSpec, x0, rng: RngLike) -> ConcatSample:
    """
    Sample the spliced process on [0, spec.horizon].

    Each block runs from its revival point until its lifetime; the exit point
    X_{tau-} picks the revival-kernel row for the next block's start.

    Args:
        spec: Concatenation specification
        x0: Start in the first block's space
        rng: Stream address; lanes 0/1/2 drive paths, clocks and revivals

    Returns:
        ConcatSample

    Raises:
        ZeroLifetimeError: a block was killed at its start
        ConfigurationError: an exit point has no revival row, or the renewal cap was hit
    """
    if isinstance(rng, RngStream):
        path_gen, clock_gen, revival_gen = (rng.sub(i).generator() for i in range(3))
    else:
        path_gen = clock_gen = revival_gen = as_generator(rng)
    starts, blocks, lifetimes = [0.0], [], []
    renewals, exits, revivals = [], [], []
    clock, x, k = 0.0, x0, 0
    dead_from = None
    while True:
        block = spec.block(k)
        path, tau = _block_lifetime(block.kill, x, spec.horizon - clock, path_gen, clock_gen)
        blocks.append(path)
        if is_censored(tau):
            lifetimes.append(None)
            break
        if tau <= 0.0:
            logger.error(f"block {k} died at its start {x}")
            raise ZeroLifetimeError(k, x)
        lifetimes.append(tau)
        sigma = clock + tau
        mu = spec.transfer(k)
        if mu is None:
            dead_from = sigma
            break
        if sigma >= spec.horizon:
            break
        z = _point(path_left_limit(path, tau))
        x = mu.draw(z, revival_gen)
        renewals.append(sigma)
        exits.append(z)
        revivals.append(x)
        clock, k = sigma, k + 1
        if k >= SIMULATION_CONFIG['max_blocks']:
            raise ConfigurationError(f"renewal cap {SIMULATION_CONFIG['max_blocks']} reached before the horizon")
        starts.append(clock)
    spliced = SplicedPath(tuple(starts), tuple(blocks), tuple(lifetimes), float(spec.horizon), dead_from)
    return ConcatSample(spliced, tuple(renewals), tuple(exits), tuple(revivals), tuple(lifetimes))


def renewal_count(sample: ConcatSample, horizon: Optional[float] = None) -> int:
    horizon = sample.path.end if horizon is None else horizon
    return sum(1 for s in sample.renewals if s <= horizon)


def renewal_intervals(samples: Sequence[ConcatSample], k: int) -> np.ndarray:
    """First k block lifetimes of every sample that renewed at least k times, shape (m, k)."""
    rows = [s.lifetimes[:k] for s in samples if len(s.renewals) >= k]
    if len(rows) < len(samples):
        logger.warning(f"{len(samples) - len(rows)} samples renewed fewer than {k} times")
    return np.array(rows, dtype=float).reshape(len(rows), k)


def renewal_times_at(samples: Sequence[ConcatSample], k: int) -> np.ndarray:
    """sigma_k for every sample that renewed at least k times."""
    return np.array([s.renewals[k - 1] for s in samples if len(s.renewals) >= k], dtype=float)


def renewal_iid_test(samples: Sequence[ConcatSample]) -> FitResult:
    """Two-sample KS between the first and second block lifetimes."""
    intervals = renewal_intervals(samples, 2)
    return two_sample_ks(intervals[:, 0], intervals[:, 1])


def _renewal_chunk(spec: ConcatSpec, x0, k: int, count: int, stream: RngStream) -> np.ndarray:
    """sigma_1..sigma_k per replication (nan past the last renewal), drawn as ``simulate_concatenated`` draws them."""
    out = np.full((count, k), np.nan)
    for r in range(count):
        path_gen, clock_gen, revival_gen = (stream.sub(r).sub(i).generator() for i in range(3))
        clock, x = 0.0, x0
        for j in range(k):
            path, tau = _block_lifetime(spec.block(j).kill, x, spec.horizon - clock, path_gen, clock_gen)
            if is_censored(tau):
                break
            if tau <= 0.0:
                logger.error(f"block {j} died at its start {x}")
                raise ZeroLifetimeError(j, x)
            mu = spec.transfer(j)
            if mu is None or clock + tau >= spec.horizon:
                break
            clock += tau
            x = mu.draw(_point(path_left_limit(path, tau)), revival_gen)
            out[r, j] = clock
    return out


def sample_renewal_times(spec: ConcatSpec, x0, k: int, n: int, rng: RngStream, jobs: int = 1) -> np.ndarray:
    """
    First k renewal times of n independent splices, shape (n, k).

    Replication r uses the same stream as ``sample_many`` so the two agree
    renewal for renewal; rows are nan past the last renewal before the horizon.
    """
    if k < 1:
        raise ValueError(f"need k >= 1, got {k}")
    return np.concatenate(run_chunks(partial(_renewal_chunk, spec, x0, int(k)), n, rng, jobs), axis=0)


def _jump_occupation(path: JumpPath, length: float, size: int) -> np.ndarray:
    rel = np.append(path.times - path.origin, path.horizon)
    rel = np.clip(rel, 0.0, length)
    durations = np.diff(rel)
    occupation = np.zeros(size)
    alive = path.states != DEAD_INDEX
    np.add.at(occupation, path.states[alive], durations[alive])
    return occupation


def occupation_measure(sample: ConcatSample, size: int) -> np.ndarray:
    """Fraction of [0, horizon] spent in each state of a cyclic finite chain."""
    p = sample.path
    occupation = np.zeros(size)
    for k, block in enumerate(p.blocks):
        span = p.end - p.starts[k]
        if p.lifetimes[k] is not None:
            span = min(span, p.lifetimes[k])
        occupation += _jump_occupation(block, span, size)
    total = occupation.sum()
    if total <= 0.0:
        raise DegenerateInputError("empty occupation record")
    return occupation / total


# ---------------------------------------------------------------------------
# Revival law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RevivalTestReport:
    """Per-exit-state chi-square of revival points against mu(z, .)."""

    k: int
    rows: tuple
    skipped: tuple

    def passed(self, threshold: float = STATISTICS['p_threshold']) -> bool:
        return all(r['pvalue'] > threshold for r in self.rows)

    def to_dict(self) -> dict:
        return {'k': self.k, 'rows': list(self.rows), 'skipped': list(self.skipped)}


def revival_conditional_test(samples: Sequence[ConcatSample], k: int, mu: RevivalKernel,
                             exit_size: int, min_samples: int = STATISTICS['min_samples']) -> RevivalTestReport:
    """
    Compare the revival points at renewal k, grouped by exit state, with the kernel rows.

    Args:
        samples: Concatenated samples
        k: Renewal index (1 = first renewal)
        mu: Configured revival kernel (finite)
        exit_size: Number of exit states
        min_samples: Rows with fewer samples are skipped

    Returns:
        RevivalTestReport
    """
    exits = np.array([s.exits[k - 1] for s in samples if len(s.renewals) >= k], dtype=int)
    revived = np.array([s.revivals[k - 1] for s in samples if len(s.renewals) >= k], dtype=int)
    rows, skipped = [], []
    for z in range(exit_size):
        chosen = revived[exits == z]
        if chosen.size < min_samples:
            logger.warning(f"exit state {z}: only {chosen.size} revivals, skipped")
            skipped.append(z)
            continue
        probs = mu.row(z)
        counts = np.bincount(chosen, minlength=probs.size)
        result = chi_square(counts, probs)
        rows.append({'exit_state': z, 'n': int(chosen.size), **result.to_dict()})
    return RevivalTestReport(int(k), tuple(rows), tuple(skipped))


# ---------------------------------------------------------------------------
# Restarts formula and exact oracles
# ---------------------------------------------------------------------------

def _constant_rate(c) -> float:
    if isinstance(c, RateFunction):
        if c.is_finite:
            values = np.asarray(c.values)
            if np.ptp(values) > 0.0:
                raise ValueError("the restarts formula needs a constant killing rate")
            return float(values[0])
        if not isinstance(c.func, ConstantRate):
            raise ValueError("the restarts formula needs a constant killing rate")
        return c.func.value
    rate = float(c)
    if rate < 0.0:
        raise ValueError(f"killing rate must be nonnegative, got {rate}")
    return rate


_HERMITE = np.polynomial.hermite_e.hermegauss(64)


def _gaussian_expectation(f: Callable, mean: float, variance: float) -> float:
    nodes, weights = _HERMITE
    values = np.asarray(f(mean + math.sqrt(max(variance, 0.0)) * nodes), dtype=float)
    return float(np.dot(weights, values) / math.sqrt(2.0 * math.pi))


def restarts_closed_form(model, mu: Constant, c, f, t: float, x0) -> float:
    """
    P_t f(x0) = e^{-ct} (K_t f)(x0) + c int_0^t e^{-cs} (mu K_s f) ds for restarts at constant rate c.

    Chains evaluate K_s by uniformization. Ornstein-Uhlenbeck blocks use the
    Gaussian transition law: f = None means the identity and is integrated in
    closed form, other f go through Gauss-Hermite quadrature.

    Args:
        model: RateModel, or an OU DiffusionModel (params kind 'ou')
        mu: Constant restart law
        c: Constant killing rate (number or constant RateFunction)
        f: Test vector, callable, or None for the identity on the line
        t: Time
        x0: Start

    Returns:
        The semigroup value
    """
    rate = _constant_rate(c)
    tol = TOLERANCES['quadrature']
    if t == 0.0:
        if isinstance(model, RateModel):
            return float(np.asarray(f, dtype=float)[int(x0)])
        return float(x0) if f is None else float(f(np.array([float(x0)]))[0])
    if isinstance(model, RateModel):
        f = np.asarray(f, dtype=float)
        head = math.exp(-rate * t) * float(uniformized_exponential(model.L, t)[int(x0)] @ f)
        if rate == 0.0:
            return head

        def integrand(s):
            return rate * math.exp(-rate * s) * float(mu.probs @ (uniformized_exponential(model.L, s) @ f))

        value, _ = integrate.quad(integrand, 0.0, t, epsabs=0.0, epsrel=tol, limit=200)
        return head + value
    params = model.params
    if params.get('kind') != 'ou':
        raise TypeError("closed-form restarts on the line need an Ornstein-Uhlenbeck block")
    theta, sigma, center = params['theta'], params['sigma'], params['mean']
    if f is None:
        head = math.exp(-rate * t) * (center + (float(x0) - center) * math.exp(-theta * t))
        if rate == 0.0:
            return head
        decay = rate + theta
        tail = center * (1.0 - math.exp(-rate * t))
        return head + tail + rate * (mu.law.mean - center) * (1.0 - math.exp(-decay * t)) / decay

    def moments(start_mean, start_var, s):
        m = center + (start_mean - center) * math.exp(-theta * s)
        v = start_var * math.exp(-2.0 * theta * s) + ou_variance(s, theta, sigma)
        return m, v

    head = math.exp(-rate * t) * _gaussian_expectation(f, *moments(float(x0), 0.0, t))
    if rate == 0.0:
        return head

    def integrand(s):
        return rate * math.exp(-rate * s) * _gaussian_expectation(f, *moments(mu.law.mean, mu.law.variance, s))

    value, _ = integrate.quad(integrand, 0.0, t, epsabs=0.0, epsrel=tol, limit=200)
    return head + value


def restore_generator(m: RateModel, c, mu: Constant) -> np.ndarray:
    """A_restore = L + diag(c)(1 mu^T - I)."""
    c = np.asarray(c, dtype=float)
    if c.shape != (m.size,) or mu.probs is None or mu.probs.size != m.size:
        raise ConfigurationError("restore chains need rates and a restart law over the chain's states")
    return m.L + np.diag(c) @ (np.outer(np.ones(m.size), mu.probs) - np.eye(m.size))


def restore_semigroup_exact(m: RateModel, c, mu: Constant, t: float) -> np.ndarray:
    """exp(t A_restore): the restore chain seen as a CTMC on its own states."""
    return uniformized_exponential(restore_generator(m, c, mu), t)


def _finite_kill_generator(kill: KillSpec) -> np.ndarray:
    if not kill.is_finite or not isinstance(kill.rule, ExpRate):
        raise TypeError("the block generator needs finite blocks killed at a rate")
    return kill.model.L - np.diag(kill.rates)


def _transfer_matrix(mu: RevivalKernel, exit_size: int) -> np.ndarray:
    if isinstance(mu, Constant):
        return np.tile(mu.probs, (exit_size, 1))
    return np.asarray(mu.matrix)


def two_block_generator(spec: ConcatSpec) -> np.ndarray:
    """[[L1 - C1, C1 mu], [0, L2 - C2]] over E_1 + E_2."""
    if spec.cyclic or len(spec.blocks) != 2:
        raise ConfigurationError("two-block oracles need a sequential spec with two blocks")
    first, second = spec.blocks[0].kill, spec.blocks[1].kill
    g1 = _finite_kill_generator(first)
    g2 = _finite_kill_generator(second)
    n1, n2 = g1.shape[0], g2.shape[0]
    out = np.zeros((n1 + n2, n1 + n2))
    out[:n1, :n1] = g1
    out[:n1, n1:] = np.diag(first.rates) @ _transfer_matrix(spec.transfers[0], n1)
    out[n1:, n1:] = g2
    return out


def two_block_semigroup_exact(spec: ConcatSpec, t: float) -> np.ndarray:
    """Rows of exp(t G) for starts in E_1; columns run over E_1 then E_2."""
    n1 = spec.blocks[0].size
    return uniformized_exponential(two_block_generator(spec), t)[:n1]


def two_block_semigroup(spec: ConcatSpec, f1, f2, t: float) -> np.ndarray:
    """
    P_t f on E_1 = Q1_t f1 + int_0^t Q1_s C1 mu Q2_{t-s} f2 ds by adaptive quadrature.

    The first block must be killed at a rate; the second may use any finite kill rule.

    Returns:
        Vector over E_1
    """
    if spec.cyclic or len(spec.blocks) != 2:
        raise ConfigurationError("two-block oracles need a sequential spec with two blocks")
    first, second = spec.blocks[0].kill, spec.blocks[1].kill
    if not isinstance(first.rule, ExpRate) or not first.is_finite or not second.is_finite:
        raise TypeError("two-block quadrature needs a finite first block killed at a rate")
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    g1 = _finite_kill_generator(first)
    jump = np.diag(first.rates) @ _transfer_matrix(spec.transfers[0], first.model.size)
    head = uniformized_exponential(g1, t) @ f1
    if t == 0.0:
        return head

    def integrand(s):
        return uniformized_exponential(g1, s) @ (jump @ (killed_semigroup_exact(second, t - s).matrix @ f2))

    value, _ = integrate.quad_vec(integrand, 0.0, t, epsabs=TOLERANCES['exit_quadrature'] * 1e-2,
                                  epsrel=TOLERANCES['quadrature'])
    return head + value


# ---------------------------------------------------------------------------
# Invariant law of restore chains
# ---------------------------------------------------------------------------

def _is_irreducible(rate_matrix: np.ndarray) -> bool:
    """Every state reaches every other through positive off-diagonal rates."""
    adjacency = (rate_matrix - np.diag(np.diag(rate_matrix))) > 0.0
    count, _ = connected_components(adjacency.astype(float), directed=True, connection='strong')
    return count == 1


def restore_invariant_solve(m: RateModel, c, mu: Constant, tol: Optional[float] = None) -> np.ndarray:
    """
    Invariant law pi of the restore chain: pi^T A_restore = 0, pi >= 0, sum(pi) = 1.

    Args:
        m: Block chain
        c: Killing-rate vector
        mu: Restart distribution
        tol: Bound on ||pi^T A_restore||_inf (TOLERANCES['invariant'] by default)

    Returns:
        pi

    Raises:
        NoUniqueInvariantError: when the restore chain is reducible, or no normalized null vector
            meets the residual bound
    """
    tol = TOLERANCES['invariant'] if tol is None else tol
    generator = restore_generator(m, c, mu)
    if not _is_irreducible(generator):
        logger.error("restore chain is reducible")
        raise NoUniqueInvariantError("restore chain is reducible, the invariant law is not unique")
    basis = linalg.null_space(generator.T)
    if basis.shape[1] != 1:
        logger.error(f"null space of dimension {basis.shape[1]}")
        raise NoUniqueInvariantError(f"null space of dimension {basis.shape[1]}")
    pi = basis[:, 0]
    pi = np.abs(pi) if pi.sum() < 0 else pi
    pi = np.clip(pi, 0.0, None)
    pi = pi / pi.sum()
    residual = float(np.max(np.abs(pi @ generator)))
    logger.debug(f"invariant residual {residual:.3e}")
    if residual > tol:
        logger.error(f"invariant residual {residual:.3e} above {tol}")
        raise NoUniqueInvariantError(f"invariant residual {residual:.3e} above {tol}")
    return pi


def invariant_residual(m: RateModel, c, mu: Constant, pi) -> float:
    return float(np.max(np.abs(np.asarray(pi) @ restore_generator(m, c, mu))))


# ---------------------------------------------------------------------------
# Restarted diffusion ensembles
# ---------------------------------------------------------------------------

def restart_ensemble_values(model: DiffusionModel, c: RateFunction, mu: Constant, x0: float, t: float,
                            f: Optional[Callable], count: int, stream: RngStream) -> np.ndarray:
    """
    f(X_t) for ``count`` independent restore paths of a diffusion block.

    Every path runs its own Euler grid started at its last renewal; killing uses
    the left-endpoint additive functional with linear crossing inside a cell,
    as ``simulate_concatenated`` does.

    Returns:
        One value per path (the identity when f is None)
    """
    noise_gen, clock_gen, revival_gen = (stream.sub(i).generator() for i in range(3))
    dt = model.dt
    sqrt_dt = math.sqrt(dt)
    x = np.full(count, float(x0))
    clock = np.zeros(count)
    af = np.zeros(count)
    level = clock_gen.exponential(size=count)
    active = np.ones(count, dtype=bool)
    while np.any(active):
        idx = np.flatnonzero(active)
        rates = c.evaluate(x[idx])
        reached = af[idx] + rates * dt
        with np.errstate(divide='ignore', invalid='ignore'):
            sigma = clock[idx] + np.where(rates > 0.0, (level[idx] - af[idx]) / rates, math.inf)
        crossing = reached >= level[idx]
        revive = crossing & (sigma <= t)
        step = ~crossing & (clock[idx] + dt <= t * (1.0 + 1e-12))
        done = ~revive & ~step
        if np.any(revive):
            r = idx[revive]
            x[r] = mu.draw_many(r.size, revival_gen)
            clock[r] = sigma[revive]
            af[r] = 0.0
            level[r] = clock_gen.exponential(size=r.size)
        if np.any(step):
            s = idx[step]
            noise = noise_gen.standard_normal(s.size)
            x[s] = x[s] + model.drift(x[s]) * dt + model.diffusion(x[s]) * sqrt_dt * noise
            af[s] = reached[step]
            clock[s] = clock[s] + dt
        active[idx[done]] = False
    if f is None:
        return x
    return np.asarray(f(x), dtype=float)


def _restart_chunk(model, c, mu, x0, t, f, count, stream):
    return restart_ensemble_values(model, c, mu, x0, t, f, count, stream)


# ---------------------------------------------------------------------------
# Semigroup, generator and Markov checks
# ---------------------------------------------------------------------------

def _tag_offsets(spec: ConcatSpec) -> dict:
    offsets, total = {}, 0
    for b in spec.blocks:
        if b.tag.id not in offsets:
            offsets[b.tag.id] = total
            total += b.size
    return offsets


def _concat_values_chunk(spec: ConcatSpec, x0, times: tuple, fs: dict, count: int, stream: RngStream) -> np.ndarray:
    out = np.empty((count, len(times)))
    for r in range(count):
        sample = simulate_concatenated(spec, x0, stream.sub(r))
        for i, t in enumerate(times):
            state = path_eval(sample.path, t)
            out[r, i] = 0.0 if is_dead(state) else fs[state.tag.id][state.point]
    return out


@dataclass(frozen=True)
class SemigroupCheckReport:
    estimate: EstimatorReport
    oracle: float
    passed: bool
    floor: float = 0.0

    def to_dict(self) -> dict:
        return {'estimate': self.estimate.to_dict(), 'oracle': self.oracle, 'passed': self.passed,
                'floor': self.floor}


def concat_oracle(spec: ConcatSpec, f, t: float, x0) -> float:
    """Exact P_t f(x0) for the configurations the check supports."""
    if len(spec.blocks) == 1 and not spec.cyclic:
        if spec.block(0).size is None:
            raise TypeError("single diffusion blocks have no exact oracle")
        return float(killed_semigroup_exact(spec.block(0).kill, t).matrix[int(x0)] @ np.asarray(f, dtype=float))
    if spec.cyclic:
        kill = spec.block(0).kill
        mu = spec.transfer(0)
        if not isinstance(mu, Constant) or not isinstance(kill.rule, ExpRate):
            raise TypeError("restore oracles need a constant restart law and rate killing")
        if kill.is_finite:
            rates = kill.rates
            if np.ptp(rates) == 0.0:
                return restarts_closed_form(kill.model, mu, float(rates[0]), f, t, x0)
            return float(restore_semigroup_exact(kill.model, rates, mu, t)[int(x0)] @ np.asarray(f, dtype=float))
        return restarts_closed_form(kill.model, mu, kill.rule.c, f, t, x0)
    f1, f2 = f
    return float(two_block_semigroup(spec, f1, f2, t)[int(x0)])


def concat_semigroup_check(spec: ConcatSpec, f, t: float, x0, n: int, rng: RngStream, jobs: int = 1,
                           key: str = 'concat', raise_on_fail: bool = False) -> SemigroupCheckReport:
    """
    Monte Carlo E_{x0}[f(X_t)] from simulated splices against the exact P_t f(x0).

    Args:
        spec: One block, a cyclic restore spec, or two sequential finite blocks
        f: Vector (one block / restore chain), (f1, f2) pair (two blocks), or a
           callable / None (identity) for diffusion restore blocks
        t: Time (t <= spec.horizon)
        x0: Start
        n: Replications
        rng: Base stream
        jobs: Worker processes
        key: Report key
        raise_on_fail: Raise TheoremCheckFailure on disagreement

    Returns:
        SemigroupCheckReport
    """
    oracle = concat_oracle(spec, f, t, x0)
    floor = 0.0
    if spec.is_finite:
        run_spec = replace(spec, horizon=t)
        if len(spec.blocks) == 2 and not spec.cyclic:
            fs = {spec.blocks[0].tag.id: np.asarray(f[0], dtype=float),
                  spec.blocks[1].tag.id: np.asarray(f[1], dtype=float)}
        else:
            fs = {spec.blocks[0].tag.id: np.asarray(f, dtype=float)}
        worker = partial(_concat_values_chunk, run_spec, x0, (float(t),), fs)
        estimate = run_replications(worker, n, rng, key, jobs)
    else:
        kill = spec.block(0).kill
        worker = partial(_restart_chunk, kill.model, kill.rule.c, spec.transfer(0), float(x0), float(t), f)
        estimate = run_replications(worker, n, rng, key, jobs)
        floor = 5.0 * kill.model.dt
    passed = within_stderr(estimate, oracle, floor=floor)
    logger.info(f"{key}: MC {estimate.mean:.6f} +- {estimate.stderr:.2e} vs exact {oracle:.6f}")
    if raise_on_fail and not passed:
        logger.error(f"{key}: Monte Carlo and exact semigroup disagree")
        raise TheoremCheckFailure(f"{key}: MC {estimate.mean} vs exact {oracle}",
                                  {'estimate': estimate.to_dict(), 'oracle': oracle})
    return SemigroupCheckReport(estimate, oracle, passed, floor)


def concat_generator_check(spec: ConcatSpec, f, x0: Optional[int] = None, steps: Sequence[float] = GENERATOR_STEPS,
                           raise_on_fail: bool = False) -> SlopeReport:
    """
    Fit the decay of (P_h f - f)/h - (A f) as h -> 0 for finite restore or two-block specs.

    Restore mode compares against L f + diag(c)(mu f - f); two-block mode against
    (L1 - C1) f1 + C1 mu f2 on E_1.
    """
    if spec.cyclic:
        kill = spec.block(0).kill
        mu = spec.transfer(0)
        f = np.asarray(f, dtype=float)
        rates = kill.rates
        limit = kill.model.L @ f + rates * (float(mu.probs @ f) - f)
        constant = np.ptp(rates) == 0.0
        base = f

        def propagate(h):
            if constant:
                return np.array([restarts_closed_form(kill.model, mu, float(rates[0]), f, h, x)
                                 for x in range(kill.model.size)])
            return restore_semigroup_exact(kill.model, rates, mu, h) @ f
    else:
        f1, f2 = (np.asarray(v, dtype=float) for v in f)
        generator = two_block_generator(spec)
        n1 = f1.size
        limit = (generator @ np.concatenate([f1, f2]))[:n1]
        base = f1

        def propagate(h):
            return two_block_semigroup_exact(spec, h) @ np.concatenate([f1, f2])

    points = []
    for h in steps:
        d = (propagate(h) - base) / h - limit
        points.append((h, float(abs(d[x0])) if x0 is not None else float(np.max(np.abs(d)))))
    report = fit_slope(points, exact_tol=TOLERANCES['semigroup'])
    if raise_on_fail and not report.passed:
        raise_slope_failure('concatenated generator', report)
    return report


def _concat_states_chunk(spec: ConcatSpec, x0, times: tuple, offsets: dict, count: int,
                         stream: RngStream) -> np.ndarray:
    out = np.empty((count, len(times)), dtype=int)
    for r in range(count):
        sample = simulate_concatenated(spec, x0, stream.sub(r))
        for i, t in enumerate(times):
            state = path_eval(sample.path, t)
            out[r, i] = DEAD_INDEX if is_dead(state) else offsets[state.tag.id] + state.point
    return out


def concat_markov_test(spec: ConcatSpec, x0, u: float, s: float, t: float, n: int, rng: RngStream,
                       y: Optional[int] = None, jobs: int = 1) -> MarkovTestReport:
    """Stratification test of the Markov property of a finite splice observed at u < s < s + t."""
    if not 0.0 < u < s or t <= 0.0:
        raise ValueError(f"need 0 < u < s and t > 0, got u={u}, s={s}, t={t}")
    if not spec.is_finite:
        raise TypeError("the stratification test needs finite blocks")
    offsets = _tag_offsets(spec)
    size = sum(b.size for b in {b.tag.id: b for b in spec.blocks}.values())
    worker = partial(_concat_states_chunk, replace(spec, horizon=s + t), x0, (u, s, s + t), offsets)
    states = np.concatenate(run_chunks(worker, n, rng, jobs), axis=0)
    report = markov_stratification(states[:, 0], states[:, 1], states[:, 2], size, y)
    logger.info(f"concatenated Markov test at y={report.present}: p = {report.test.pvalue:.4f}")
    return report


def _concat_samples_chunk(spec: ConcatSpec, x0, count: int, stream: RngStream) -> list:
    return [simulate_concatenated(spec, x0, stream.sub(r)) for r in range(count)]


def sample_many(spec: ConcatSpec, x0, n: int, rng: RngStream, jobs: int = 1) -> list:
    """n independent ConcatSamples in replication order."""
    chunks = run_chunks(partial(_concat_samples_chunk, spec, x0), n, rng, jobs)
    return [s for chunk in chunks for s in chunk]
