"""
Concrete Markov processes: finite-state CTMCs (exact jump-chain simulation)
and 1-D Euler-Maruyama diffusions, together with the path objects they produce
and exact uniformization oracles for e^{tL} and e^{t(L - diag c)}.

Paths keep an absolute clock plus an ``origin``; time shifts only move the
origin, so shifting twice is bit-identical to shifting once by the sum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import stats

from config import TOLERANCES
from errors import InvalidKernelError, PathBlowupError, PathDomainError
from extended_state import DEAD, Alive, ExtState, StateSpaceTag, SubKernel, is_dead, real_line

logger = logging.getLogger(__name__)

DEAD_INDEX = -1
SNAP = TOLERANCES['grid_snap']


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RateModel:
    """CTMC generator L over a finite tagged space."""

    L: np.ndarray
    tag: StateSpaceTag

    def __post_init__(self):
        arr = np.array(self.L, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, 'L', arr)
        n = self.tag.size
        if n is None or arr.shape != (n, n):
            raise InvalidKernelError(f"rate matrix shape {arr.shape} does not match tag size {n}")
        off = arr - np.diag(np.diag(arr))
        if np.any(off < 0.0):
            raise InvalidKernelError("rate matrix has negative off-diagonal entries")
        scale = max(1.0, float(np.max(np.abs(arr))))
        worst = float(np.max(np.abs(arr.sum(axis=1))))
        if worst > TOLERANCES['row_sum'] * scale:
            raise InvalidKernelError(f"rate matrix rows must sum to 0, worst row sum {worst!r}")

    @property
    def size(self) -> int:
        return self.tag.size

    @property
    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.L)

    def jump_probabilities(self) -> np.ndarray:
        """Embedded jump chain L[x, y] / -L[x, x]; absorbing rows stay zero."""
        off = self.L - np.diag(np.diag(self.L))
        rates = self.exit_rates
        probs = np.zeros_like(off)
        moving = rates > 0
        probs[moving] = off[moving] / rates[moving, None]
        return probs


class LinearDrift:
    """x -> -theta (x - mean)."""

    def __init__(self, theta: float, mean: float = 0.0):
        self.theta = float(theta)
        self.mean = float(mean)

    def __call__(self, x):
        return -self.theta * (x - self.mean)


class ConstantCoefficient:
    """x -> value, broadcast over arrays."""

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.value)


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """dX = drift(X) dt + diffusion(X) dW, discretized with step dt.

    Coefficient callables must accept numpy arrays. ``params`` carries closed-form
    parameters (theta, sigma, mean) when the model is an Ornstein-Uhlenbeck process.
    """

    drift: Callable
    diffusion: Callable
    dt: float
    tag: StateSpaceTag = field(default_factory=real_line)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"step dt must be positive, got {self.dt}")
        if self.tag.is_finite:
            raise ValueError("diffusions live on the real line")


def ou_model(theta: float, sigma: float, dt: float, mean: float = 0.0, tag_id: int = 0) -> DiffusionModel:
    """Ornstein-Uhlenbeck model dX = -theta (X - mean) dt + sigma dW."""
    return DiffusionModel(
        drift=LinearDrift(theta, mean),
        diffusion=ConstantCoefficient(sigma),
        dt=dt,
        tag=real_line(tag_id),
        params={'kind': 'ou', 'theta': float(theta), 'sigma': float(sigma), 'mean': float(mean)},
    )


def ou_mean(x0: float, t: float, theta: float, mean: float = 0.0) -> float:
    return mean + (x0 - mean) * math.exp(-theta * t)


def ou_variance(t: float, theta: float, sigma: float) -> float:
    if theta == 0.0:
        return sigma ** 2 * t
    return sigma ** 2 * (1.0 - math.exp(-2.0 * theta * t)) / (2.0 * theta)


Model = Union[RateModel, DiffusionModel]


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Counter-style stream address: (master_seed, stream_id, lane).

    The generator is seeded from ``SeedSequence(master_seed, spawn_key=(stream_id, *lane))``
    so distinct ids or lanes give independent streams.
    """

    master_seed: int
    stream_id: int = 0
    lane: tuple = ()

    def __post_init__(self):
        if self.master_seed < 0 or self.stream_id < 0:
            raise ValueError("seeds and stream ids must be non-negative")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=(self.stream_id,) + tuple(self.lane))
        return np.random.default_rng(seq)

    def sub(self, k: int) -> 'RngStream':
        """Independent lane below this stream."""
        return RngStream(self.master_seed, self.stream_id, tuple(self.lane) + (int(k),))

    def offset(self, i: int) -> 'RngStream':
        """The i-th stream after this one (used for replication chunks)."""
        return RngStream(self.master_seed, self.stream_id + int(i), tuple(self.lane))


RngLike = Union[RngStream, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return rng.generator()


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

def first_grid_index(t: float, dt: float) -> int:
    """Smallest k with k * dt >= t."""
    k = max(int(math.ceil(t / dt)), 0)
    while k > 0 and (k - 1) * dt >= t:
        k -= 1
    while k * dt < t:
        k += 1
    return k


def _check_time(t: float, horizon: float, left: bool = False):
    if t < 0.0 or t > horizon * (1.0 + SNAP) + SNAP:
        raise PathDomainError(f"time {t} outside [0, {horizon}]")
    if left and t <= 0.0:
        raise PathDomainError("left limits need t > 0")


@dataclass(frozen=True, eq=False)
class JumpPath:
    """Piecewise-constant right-continuous path stored as an event list.

    ``times`` are absolute event times, ``states`` the state index entered at each
    event (``DEAD_INDEX`` for the cemetery). The path is observed on
    [origin, end]; its relative time t maps to absolute time origin + t.
    """

    times: np.ndarray
    states: np.ndarray
    end: float
    tag: StateSpaceTag
    origin: float = 0.0

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        states = np.array(self.states, dtype=int)
        if times.ndim != 1 or times.shape != states.shape or times.size == 0:
            raise ValueError("a jump path needs matching non-empty time and state arrays")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("event times must be strictly ascending")
        if times[0] > self.origin:
            raise ValueError("the first event must sit at the path origin")
        if self.end < self.origin:
            raise ValueError("path end precedes its origin")
        # keep only the event in force at the origin and the ones after it
        keep = int(np.searchsorted(times, self.origin, side='right')) - 1
        times, states = times[keep:], states[keep:]
        dead = np.flatnonzero(states == DEAD_INDEX)
        if dead.size and np.any(states[dead[0]:] != DEAD_INDEX):
            raise ValueError("a path that reached the cemetery must stay there")
        if dead.size and dead[0] + 1 < states.size:
            times, states = times[:dead[0] + 1], states[:dead[0] + 1]
        times.setflags(write=False)
        states.setflags(write=False)
        object.__setattr__(self, 'times', times)
        object.__setattr__(self, 'states', states)

    @property
    def horizon(self) -> float:
        return self.end - self.origin

    @property
    def events(self) -> list:
        """[(relative time, ExtState)], starting at 0."""
        rel = [0.0] + [float(t - self.origin) for t in self.times[1:]]
        return [(t, _to_state(self.tag, int(s))) for t, s in zip(rel, self.states)]

    def index_at(self, t: float) -> int:
        return int(np.searchsorted(self.times, self.origin + t, side='right')) - 1

    @property
    def end_state(self) -> int:
        return int(self.states[-1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, JumpPath):
            return NotImplemented
        return (self.tag == other.tag and self.origin == other.origin and self.end == other.end
                and np.array_equal(self.times, other.times) and np.array_equal(self.states, other.states))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class GridPath:
    """Euler grid path: value k holds on [k dt, (k+1) dt) in absolute grid time.

    NaN values mark the cemetery. ``death_time`` (absolute) may fall inside a grid
    cell when a lifetime was found by interpolation; evaluation returns the
    cemetery from that instant on. ``start`` is the grid index of the origin.
    """

    dt: float
    values: np.ndarray
    tag: StateSpaceTag = field(default_factory=real_line)
    death_time: Optional[float] = None
    start: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size <= self.start:
            raise ValueError("a grid path needs at least one value after its start index")
        dead = np.flatnonzero(np.isnan(values))
        if dead.size and not np.all(np.isnan(values[dead[0]:])):
            raise ValueError("a path that reached the cemetery must stay there")
        if self.death_time is not None:
            first_dead = first_grid_index(self.death_time, self.dt)
            if first_dead < values.size and not np.all(np.isnan(values[first_dead:])):
                raise ValueError("grid values after the death time must be NaN")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def origin(self) -> float:
        return self.start * self.dt

    @property
    def horizon(self) -> float:
        return (self.values.size - 1 - self.start) * self.dt

    @property
    def absolute_death(self) -> Optional[float]:
        if self.death_time is not None:
            return self.death_time
        dead = np.flatnonzero(np.isnan(self.values))
        if dead.size:
            return float(dead[0] * self.dt)
        return None

    def cell(self, t: float) -> int:
        """Absolute grid index in force at relative time t."""
        k = self.start + int(math.floor(t / self.dt + SNAP))
        return min(k, self.values.size - 1)

    def on_grid(self, t: float) -> bool:
        ratio = t / self.dt
        return abs(ratio - round(ratio)) <= SNAP * max(1.0, abs(ratio))

    def __eq__(self, other) -> bool:
        if not isinstance(other, GridPath):
            return NotImplemented
        return (self.dt == other.dt and self.start == other.start and self.death_time == other.death_time
                and self.tag == other.tag and np.array_equal(self.values, other.values, equal_nan=True))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SplicedPath:
    """Blocks laid end to end: block k runs on [starts[k], starts[k+1]).

    ``starts`` are absolute renewal times (first 0), ``blocks`` the killed block
    paths in their own clocks and ``lifetimes`` their lifetimes (None while the
    block is still alive at the end). With ``dead_from`` set the path is in the
    cemetery from that absolute time on.
    """

    starts: tuple
    blocks: tuple
    lifetimes: tuple
    end: float
    dead_from: Optional[float] = None
    origin: float = 0.0

    @property
    def horizon(self) -> float:
        return self.end - self.origin

    def block_at(self, absolute: float) -> int:
        return int(np.searchsorted(np.asarray(self.starts), absolute, side='right')) - 1

    def local_time(self, k: int, absolute: float) -> float:
        """Block-k clock reading at an absolute time, kept strictly inside its lifetime."""
        local = max(absolute - self.starts[k], 0.0)
        lifetime = self.lifetimes[k]
        if lifetime is not None and k + 1 < len(self.blocks) and local >= lifetime:
            local = float(np.nextafter(lifetime, 0.0))
        return min(local, self.blocks[k].horizon)


Path = Union[JumpPath, GridPath, SplicedPath]


def _to_state(tag: StateSpaceTag, index: int) -> ExtState:
    if index == DEAD_INDEX:
        return DEAD
    return Alive(tag, index)


def _grid_state(path: GridPath, k: int) -> ExtState:
    value = path.values[k]
    if np.isnan(value):
        return DEAD
    return Alive(path.tag, float(value))


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def sample_ctmc_path(m: RateModel, x0: int, horizon: float, rng: RngLike) -> JumpPath:
    """
    Jump-chain / holding-time simulation of a CTMC on [0, horizon].

    Args:
        m: Rate model
        x0: Initial state index
        horizon: Observation window length
        rng: Stream address or an already running generator

    Returns:
        JumpPath starting at x0
    """
    if not 0 <= x0 < m.size:
        raise ValueError(f"initial state {x0} outside 0..{m.size - 1}")
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    gen = as_generator(rng)
    rates = m.exit_rates
    cumulative = np.cumsum(m.jump_probabilities(), axis=1)
    times, states = [0.0], [int(x0)]
    t, x = 0.0, int(x0)
    while rates[x] > 0.0:
        t += gen.exponential(1.0 / rates[x])
        if t > horizon:
            break
        u = gen.random() * cumulative[x, -1]
        y = int(np.searchsorted(cumulative[x], u, side='right'))
        x = min(y, m.size - 1)
        times.append(t)
        states.append(x)
    return JumpPath(np.array(times), np.array(states), float(horizon), m.tag)


def _grid_steps(horizon: float, dt: float) -> int:
    steps = int(math.floor(horizon / dt + SNAP))
    if steps < 1:
        raise ValueError(f"horizon {horizon} shorter than one step dt={dt}")
    return steps


def sample_sde_paths(m: DiffusionModel, x0, horizon: float, rng: RngLike, count: int = 1) -> np.ndarray:
    """
    Euler-Maruyama ensemble, vectorized across paths.

    Args:
        m: Diffusion model
        x0: Scalar or per-path initial values
        horizon: Window length (at least one step)
        rng: Stream address or generator
        count: Number of paths

    Returns:
        Array of shape (count, steps + 1)
    """
    steps = _grid_steps(horizon, m.dt)
    gen = as_generator(rng)
    out = np.empty((count, steps + 1))
    out[:, 0] = x0
    sqrt_dt = math.sqrt(m.dt)
    noise = gen.standard_normal((steps, count))
    x = out[:, 0].copy()
    for k in range(steps):
        x = x + m.drift(x) * m.dt + m.diffusion(x) * sqrt_dt * noise[k]
        if not np.all(np.isfinite(x)):
            bad = x[~np.isfinite(x)][0]
            logger.error(f"Euler-Maruyama blowup at step {k + 1}")
            raise PathBlowupError((k + 1) * m.dt, float(bad))
        out[:, k + 1] = x
    return out


def sample_sde_path(m: DiffusionModel, x0: float, horizon: float, rng: RngLike) -> GridPath:
    """Single Euler-Maruyama path x_{k+1} = x_k + b(x_k) dt + s(x_k) sqrt(dt) N(0,1)."""
    values = sample_sde_paths(m, float(x0), horizon, rng, count=1)[0]
    return GridPath(m.dt, values, m.tag)


def sample_path(model: Model, x0, horizon: float, rng: RngLike) -> Path:
    if isinstance(model, RateModel):
        return sample_ctmc_path(model, int(x0), horizon, rng)
    return sample_sde_path(model, float(x0), horizon, rng)


def append_path(head: Path, tail: Path) -> Path:
    """Continue ``head`` with ``tail`` (sampled from head's end state) for tail.horizon more time."""
    if isinstance(head, JumpPath) and isinstance(tail, JumpPath):
        base = head.end
        times = list(head.times)
        states = list(head.states)
        for t, s in zip(tail.times[1:], tail.states[1:]):
            times.append(base + (t - tail.origin))
            states.append(s)
        return JumpPath(np.array(times), np.array(states, dtype=int), base + tail.horizon, head.tag, head.origin)
    if isinstance(head, GridPath) and isinstance(tail, GridPath):
        values = np.concatenate([head.values, tail.values[tail.start + 1:]])
        return GridPath(head.dt, values, head.tag, None, head.start)
    raise TypeError("can only append paths of the same kind")


# ---------------------------------------------------------------------------
# Evaluation and shifts
# ---------------------------------------------------------------------------

def path_eval(p: Path, t: float) -> ExtState:
    """Right-continuous evaluation X_t."""
    _check_time(t, p.horizon)
    if isinstance(p, JumpPath):
        return _to_state(p.tag, int(p.states[p.index_at(t)]))
    if isinstance(p, GridPath):
        death = p.absolute_death
        if death is not None and p.origin + t >= death:
            return DEAD
        return _grid_state(p, p.cell(t))
    absolute = p.origin + t
    if p.dead_from is not None and absolute >= p.dead_from:
        return DEAD
    k = p.block_at(absolute)
    return path_eval(p.blocks[k], p.local_time(k, absolute))


def path_left_limit(p: Path, t: float) -> ExtState:
    """Left limit X_{t-}; at a jump time this is the pre-jump state."""
    _check_time(t, p.horizon, left=True)
    if isinstance(p, JumpPath):
        k = int(np.searchsorted(p.times, p.origin + t, side='left')) - 1
        return _to_state(p.tag, int(p.states[max(k, 0)]))
    if isinstance(p, GridPath):
        death = p.absolute_death
        absolute = p.origin + t
        if death is not None and absolute > death:
            return DEAD
        if p.on_grid(absolute):
            k = int(round(absolute / p.dt)) - 1
        else:
            k = int(math.floor(absolute / p.dt))
        return _grid_state(p, max(min(k, p.values.size - 1), p.start))
    absolute = p.origin + t
    if p.dead_from is not None and absolute > p.dead_from:
        return DEAD
    k = max(int(np.searchsorted(np.asarray(p.starts), absolute, side='left')) - 1, 0)
    block = p.blocks[k]
    local = absolute - p.starts[k]
    if local <= 0.0:
        return path_eval(block, 0.0)
    lifetime = p.lifetimes[k]
    if lifetime is not None and k + 1 < len(p.blocks):
        local = min(local, lifetime)
    return path_left_limit(block, min(local, block.horizon))


def shift_path(p: Path, s: float) -> Path:
    """theta_s: the path seen from time s on."""
    if s < 0.0 or s > p.horizon * (1.0 + SNAP):
        raise PathDomainError(f"shift {s} outside [0, {p.horizon}]")
    if s == 0.0:
        return p
    if isinstance(p, JumpPath):
        return JumpPath(p.times, p.states, p.end, p.tag, p.origin + s)
    if isinstance(p, GridPath):
        if not p.on_grid(s):
            raise PathDomainError(f"grid paths shift by multiples of dt={p.dt}, got {s}")
        return GridPath(p.dt, p.values, p.tag, p.death_time, p.start + int(round(s / p.dt)))
    return SplicedPath(p.starts, p.blocks, p.lifetimes, p.end, p.dead_from, p.origin + s)


# ---------------------------------------------------------------------------
# Exact semigroups
# ---------------------------------------------------------------------------

def uniformized_exponential(M: np.ndarray, t: float, tol: float = TOLERANCES['uniformization']) -> np.ndarray:
    """
    e^{tM} for M with nonnegative off-diagonal entries and row sums <= 0.

    Uniformization with rate q = max(-M_xx): e^{tM} = sum_k Pois(k; qt) P^k with
    P = I + M/q substochastic. Large qt is split into 2^j pieces and squared back.

    Args:
        M: Rate matrix, possibly with killing on the diagonal
        t: Time, t >= 0
        tol: Poisson tail mass dropped

    Returns:
        Dense matrix exponential
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    identity = np.eye(n)
    if t < 0.0:
        raise ValueError(f"negative time {t}")
    q = float(np.max(-np.diag(M))) if n else 0.0
    if t == 0.0 or q <= 0.0:
        return identity
    squarings = max(0, int(math.ceil(math.log2(q * t / 32.0)))) if q * t > 32.0 else 0
    tau = t / (2 ** squarings)
    lam = q * tau
    piece_tol = tol / (2 ** squarings)
    order = int(stats.poisson.isf(piece_tol, lam)) + 1
    weights = stats.poisson.pmf(np.arange(order + 1), lam)
    P = identity + M / q
    term = identity
    result = weights[0] * identity
    for k in range(1, order + 1):
        term = term @ P
        result = result + weights[k] * term
    for _ in range(squarings):
        result = result @ result
    logger.debug(f"uniformization: q={q:.3g}, order={order}, squarings={squarings}")
    return result


def killing_generator(m: RateModel, c=None) -> np.ndarray:
    """L - diag(c)."""
    if c is None:
        return m.L.copy()
    c = np.asarray(c, dtype=float)
    if c.shape != (m.size,) or np.any(c < 0.0):
        raise ValueError("killing rates must be a nonnegative vector over the state space")
    return m.L - np.diag(c)


def ctmc_semigroup_exact(m: RateModel, c, t: float) -> SubKernel:
    """
    Exact K_t = e^{tL}, or Q_t = e^{t(L - diag c)} when rates are supplied.

    Args:
        m: Rate model
        c: Killing-rate vector or None
        t: Time

    Returns:
        SubKernel on m's tag
    """
    matrix = uniformized_exponential(killing_generator(m, c), t)
    np.clip(matrix, 0.0, 1.0, out=matrix)
    return SubKernel(matrix, m.tag)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def path_to_json(p: Path) -> dict:
    """Jump paths: {"kind": "jump", "events": [[t, state|null], ...]}; grid paths list values."""
    if isinstance(p, JumpPath):
        events = [[t, None if is_dead(s) else s.point] for t, s in p.events]
        return {'kind': 'jump', 'events': events, 'horizon': p.horizon, 'tag': p.tag.id, 'size': p.tag.size}
    if isinstance(p, GridPath):
        values = [None if np.isnan(v) else float(v) for v in p.values[p.start:]]
        obj = {'kind': 'grid', 'dt': p.dt, 'values': values, 'tag': p.tag.id}
        if p.death_time is not None:
            obj['death_time'] = p.death_time - p.origin
        return obj
    raise TypeError(f"no JSON form for {type(p).__name__}")


def path_from_json(obj: dict) -> Path:
    if obj['kind'] == 'jump':
        tag = StateSpaceTag(int(obj['tag']), int(obj['size']))
        times = np.array([e[0] for e in obj['events']], dtype=float)
        states = np.array([DEAD_INDEX if e[1] is None else int(e[1]) for e in obj['events']], dtype=int)
        return JumpPath(times, states, float(obj['horizon']), tag)
    if obj['kind'] == 'grid':
        values = np.array([np.nan if v is None else v for v in obj['values']], dtype=float)
        return GridPath(float(obj['dt']), values, real_line(int(obj.get('tag', 0))), obj.get('death_time'))
    raise ValueError(f"unknown path kind {obj['kind']!r}")
