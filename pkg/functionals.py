"""
Additive and multiplicative functionals along paths, terminal times, hitting
times and path lifetimes.

Infinite times are replaced by ``Censored(horizon)``: every consumer has to
branch on it explicitly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd

from errors import PathDomainError, RateBoundError
from extended_state import StateSpaceTag
from process_models import DEAD_INDEX, GridPath, JumpPath, Path, SplicedPath, shift_path

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Censored:
    """Stand-in for a time beyond the observation window."""

    horizon: float


Lifetime = Union[float, Censored]


def is_censored(value) -> bool:
    return isinstance(value, Censored)


def lifetime_value(value: Lifetime) -> float:
    """Numeric form with censored times mapped to +inf."""
    return math.inf if is_censored(value) else float(value)


# ---------------------------------------------------------------------------
# Killing rates
# ---------------------------------------------------------------------------

class QuadraticRate:
    """x -> min(scale * (x - center)^2, cap)."""

    def __init__(self, scale: float, cap: float, center: float = 0.0):
        self.scale = float(scale)
        self.cap = float(cap)
        self.center = float(center)

    def __call__(self, x):
        return np.minimum(self.scale * (np.asarray(x, dtype=float) - self.center) ** 2, self.cap)


class ConstantRate:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.value)


@dataclass(frozen=True, eq=False)
class RateFunction:
    """Killing rate c with a declared bound c_max.

    Finite spaces carry a vector ``values``; the real line carries a vectorized
    callable ``func``. Every evaluation is checked against [0, c_max].
    """

    c_max: float
    values: Optional[np.ndarray] = None
    func: Optional[Callable] = None
    tag: Optional[StateSpaceTag] = None

    def __post_init__(self):
        if (self.values is None) == (self.func is None):
            raise ValueError("a rate function needs exactly one of values / func")
        if not math.isfinite(self.c_max) or self.c_max < 0.0:
            raise ValueError(f"c_max must be a finite nonnegative bound, got {self.c_max}")
        if self.values is not None:
            arr = np.array(self.values, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, 'values', arr)
            self._check(arr)
            if self.tag is not None and self.tag.size != arr.size:
                raise ValueError(f"{arr.size} rates for a space of size {self.tag.size}")

    @classmethod
    def on_states(cls, values, tag: Optional[StateSpaceTag] = None, c_max: Optional[float] = None) -> 'RateFunction':
        values = np.asarray(values, dtype=float)
        bound = float(np.max(values)) if c_max is None else float(c_max)
        return cls(c_max=bound, values=values, tag=tag)

    @classmethod
    def on_line(cls, func: Callable, c_max: float) -> 'RateFunction':
        return cls(c_max=float(c_max), func=func)

    @property
    def is_finite(self) -> bool:
        return self.values is not None

    def _check(self, rates: np.ndarray):
        bad = ~np.isfinite(rates) | (rates < 0.0) | (rates > self.c_max)
        if np.any(bad):
            value = float(rates[bad][0])
            logger.error(f"killing rate {value} outside [0, {self.c_max}]")
            raise RateBoundError(value, self.c_max)

    def evaluate(self, points) -> np.ndarray:
        """Rates at state indices (finite) or reals (line); the cemetery has rate 0."""
        if self.values is not None:
            idx = np.asarray(points, dtype=int)
            rates = np.where(idx == DEAD_INDEX, 0.0, self.values[np.clip(idx, 0, None)])
            return rates
        x = np.asarray(points, dtype=float)
        dead = np.isnan(x)
        rates = np.zeros_like(x)
        if np.any(~dead):
            rates[~dead] = self.func(x[~dead])
        self._check(rates)
        return rates

    def __call__(self, point) -> float:
        return float(self.evaluate(np.array([point]))[0])


# ---------------------------------------------------------------------------
# Additive functional traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AfTrace:
    """Nondecreasing piecewise-linear A_t on [0, horizon], stored as breakpoints."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.shape != values.shape or times.size < 1:
            raise ValueError("breakpoint arrays must match")
        if times[0] != 0.0 or values[0] != 0.0:
            raise ValueError("an additive functional starts at A_0 = 0")
        if np.any(np.diff(values) < 0.0) or np.any(np.diff(times) < 0.0):
            raise ValueError("an additive functional is nondecreasing")
        object.__setattr__(self, 'times', times)
        object.__setattr__(self, 'values', values)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def value_at(self, t: float) -> float:
        if t < 0.0 or t > self.horizon * (1.0 + 1e-12):
            raise PathDomainError(f"time {t} outside [0, {self.horizon}]")
        return float(np.interp(t, self.times, self.values))

    def first_passage(self, level: float) -> Lifetime:
        """inf{t : A_t >= level}, exact on the piecewise-linear trace."""
        if level <= 0.0:
            return 0.0
        idx = int(np.searchsorted(self.values, level, side='left'))
        if idx >= self.values.size:
            return Censored(self.horizon)
        a0, a1 = self.values[idx - 1], self.values[idx]
        t0, t1 = self.times[idx - 1], self.times[idx]
        return float(t0 + (level - a0) / (a1 - a0) * (t1 - t0))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'t': self.times, 'value': self.values})


def _jump_segments(p: JumpPath):
    rel = np.concatenate([[0.0], p.times[1:] - p.origin, [p.horizon]])
    durations = np.diff(rel)
    return rel, durations, p.states


def additive_trace(p: Path, c: RateFunction) -> AfTrace:
    """
    Full trace of A_t = int_0^t c(X_s) ds along a path.

    Exact segment sums on jump paths; left-endpoint Riemann sums (linear inside a
    cell) on grid paths, so A only uses past values.

    Args:
        p: Jump or grid path
        c: Killing rate matching the path's state space

    Returns:
        AfTrace on [0, p.horizon]
    """
    if isinstance(p, JumpPath):
        if not c.is_finite:
            raise TypeError("jump paths need a rate vector")
        if c.tag is not None and c.tag.id != p.tag.id:
            raise ValueError(f"rate tag {c.tag.id} does not match path tag {p.tag.id}")
        rel, durations, states = _jump_segments(p)
        increments = c.evaluate(states) * durations
        values = np.concatenate([[0.0], np.cumsum(increments)])
        return AfTrace(rel, np.maximum.accumulate(values))
    if isinstance(p, GridPath):
        if c.is_finite:
            raise TypeError("grid paths need a rate function on the line")
        x = p.values[p.start:]
        cells = x.size - 1
        rel = np.arange(x.size) * p.dt
        rates = c.evaluate(x[:-1])
        widths = np.full(cells, p.dt)
        death = p.absolute_death
        if death is not None:
            death_rel = death - p.origin
            if death_rel <= 0.0:
                return AfTrace(np.array([0.0, p.horizon]), np.zeros(2))
            m = int(math.floor(death_rel / p.dt))
            if m < cells and death_rel > m * p.dt:
                widths[m] = death_rel - m * p.dt
                rates[m + 1:] = 0.0
                values = np.concatenate([[0.0], np.cumsum(rates * widths)])
                times = np.insert(rel, m + 1, death_rel)
                values = np.insert(values, m + 1, values[m + 1])
                return AfTrace(times, values)
        values = np.concatenate([[0.0], np.cumsum(rates * widths)])
        return AfTrace(rel, values)
    raise TypeError(f"no additive functional on {type(p).__name__}")


def additive_integral(p: Path, c: RateFunction, t: float) -> float:
    """A_t(p)."""
    if t < 0.0 or t > p.horizon * (1.0 + 1e-12):
        raise PathDomainError(f"time {t} outside [0, {p.horizon}]")
    return additive_trace(p, c).value_at(min(t, p.horizon))


# ---------------------------------------------------------------------------
# Multiplicative functionals
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExpMfTrace:
    """M_t = exp(-A_t)."""

    af: AfTrace

    @property
    def horizon(self) -> float:
        return self.af.horizon

    def value_at(self, t: float) -> float:
        return math.exp(-self.af.value_at(t))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'t': self.af.times, 'value': np.exp(-self.af.values)})


@dataclass(frozen=True)
class IndicatorMfTrace:
    """M_t = 1{t < tau}."""

    tau: Lifetime
    horizon: float

    def value_at(self, t: float) -> float:
        if t < 0.0 or t > self.horizon * (1.0 + 1e-12):
            raise PathDomainError(f"time {t} outside [0, {self.horizon}]")
        return 1.0 if t < lifetime_value(self.tau) else 0.0

    def to_frame(self) -> pd.DataFrame:
        if is_censored(self.tau):
            return pd.DataFrame({'t': [0.0, self.horizon], 'value': [1.0, 1.0]})
        return pd.DataFrame({'t': [0.0, self.tau, self.horizon], 'value': [float(self.tau > 0.0), 0.0, 0.0]})


MfTrace = Union[ExpMfTrace, IndicatorMfTrace]


def mf_from_af(a: AfTrace) -> ExpMfTrace:
    return ExpMfTrace(a)


def ls_increment(m: MfTrace, s: float, t: float) -> float:
    """Mass M_s - M_t the Lebesgue-Stieltjes measure of -M gives to (s, t]."""
    if not s < t:
        raise ValueError(f"need s < t, got s={s}, t={t}")
    return m.value_at(s) - m.value_at(t)


# ---------------------------------------------------------------------------
# Terminal rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HitClosedSet:
    """Closed target: a set of state indices, or a union of closed real intervals."""

    states: frozenset = frozenset()
    intervals: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'states', frozenset(int(s) for s in self.states))
        intervals = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        for lo, hi in intervals:
            if lo > hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        object.__setattr__(self, 'intervals', intervals)

    def contains_states(self, indices: np.ndarray) -> np.ndarray:
        return np.isin(np.asarray(indices, dtype=int), list(self.states))

    def contains_points(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        hit = np.zeros(x.shape, dtype=bool)
        for lo, hi in self.intervals:
            hit |= (x >= lo) & (x <= hi)
        return hit


@dataclass(frozen=True)
class Deterministic:
    """Kill at a fixed reading of the path clock."""

    time: float

    def __post_init__(self):
        if self.time < 0.0:
            raise ValueError(f"terminal time must be nonnegative, got {self.time}")


TerminalRule = Union[HitClosedSet, Deterministic]


def hitting_time(p: Path, target: HitClosedSet) -> Lifetime:
    """
    tau = inf{t : X_t in B} for a closed target on a right-continuous path.

    The infimum is attained: when finite, X_tau lies in the target.
    """
    if isinstance(p, JumpPath):
        hits = np.flatnonzero(target.contains_states(p.states) & (p.states != DEAD_INDEX))
        if hits.size == 0:
            return Censored(p.horizon)
        i = int(hits[0])
        return 0.0 if i == 0 else float(p.times[i] - p.origin)
    if isinstance(p, GridPath):
        x = p.values[p.start:]
        hits = np.flatnonzero(target.contains_points(x))
        if hits.size == 0:
            return Censored(p.horizon)
        return float(hits[0] * p.dt)
    raise TypeError(f"hitting times are defined on jump and grid paths, not {type(p).__name__}")


def terminal_time(p: Path, rule: TerminalRule) -> Lifetime:
    if isinstance(rule, HitClosedSet):
        return hitting_time(p, rule)
    remaining = rule.time - p.origin
    if remaining > p.horizon:
        return Censored(p.horizon)
    return max(remaining, 0.0)


def mf_terminal(p: Path, rule: TerminalRule) -> IndicatorMfTrace:
    """M_t = 1_{[0, tau)}(t) for a terminal rule."""
    return IndicatorMfTrace(terminal_time(p, rule), p.horizon)


def terminal_identity_holds(p: Path, rule: TerminalRule, s: float, tol: float = 1e-12) -> bool:
    """s + tau(theta_s p) == tau(p) whenever s < tau(p)."""
    tau = terminal_time(p, rule)
    if not s < lifetime_value(tau):
        return True
    shifted = terminal_time(shift_path(p, s), rule)
    if is_censored(tau) or is_censored(shifted):
        return is_censored(tau) and is_censored(shifted)
    return abs(s + shifted - tau) <= tol * max(1.0, tau)


def path_lifetime(p: Path) -> Lifetime:
    """zeta = inf{t : X_t = Delta}."""
    if isinstance(p, JumpPath):
        dead = np.flatnonzero(p.states == DEAD_INDEX)
        if dead.size == 0:
            return Censored(p.horizon)
        i = int(dead[0])
        return 0.0 if i == 0 else float(p.times[i] - p.origin)
    if isinstance(p, GridPath):
        death = p.absolute_death
        if death is None:
            return Censored(p.horizon)
        return max(death - p.origin, 0.0)
    if isinstance(p, SplicedPath):
        if p.dead_from is None:
            return Censored(p.horizon)
        return max(p.dead_from - p.origin, 0.0)
    raise TypeError(f"unknown path type {type(p).__name__}")
