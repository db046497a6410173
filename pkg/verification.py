"""
Statistical toolkit shared by the killing and concatenation checks: mergeable
Monte Carlo reports, goodness-of-fit tests, convergence-slope fits and the
chunked replication runner.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from config import SIMULATION_CONFIG, SLOPE_BAND, STATISTICS
from errors import DegenerateInputError, EstimatorAbortError, ReportKeyMismatchError, TheoremCheckFailure
from process_models import RngStream

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Estimator reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorReport:
    """Running mean/variance summary of i.i.d. replications.

    ``m2`` is the sum of squared deviations from the mean, so two reports merge
    exactly with the parallel-variance formula. ``streams`` is the inclusive
    range of stream ids that produced the replications.
    """

    key: str
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0
    master_seed: Optional[int] = None
    streams: Optional[tuple] = None

    @classmethod
    def empty(cls, key: str) -> 'EstimatorReport':
        return cls(key)

    @classmethod
    def from_samples(cls, key: str, values, master_seed: Optional[int] = None,
                     stream: Optional[int] = None, offset: int = 0) -> 'EstimatorReport':
        """
        Summarize a batch of replications.

        Args:
            key: Experiment key the values belong to
            values: One value per replication
            master_seed: Seed provenance
            stream: Stream id the batch was drawn from
            offset: Index of the first replication, for error messages

        Returns:
            EstimatorReport over the batch

        Raises:
            EstimatorAbortError: on the first non-finite value
        """
        values = np.asarray(values, dtype=float).ravel()
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            logger.error(f"{key}: non-finite integrand at replication {offset + int(bad[0])}")
            raise EstimatorAbortError(float(values[bad[0]]), offset + int(bad[0]))
        if values.size == 0:
            return cls(key, master_seed=master_seed)
        mean = float(np.mean(values))
        m2 = float(np.sum((values - mean) ** 2))
        streams = None if stream is None else (int(stream), int(stream))
        return cls(key, int(values.size), mean, m2, master_seed, streams)

    @property
    def variance(self) -> float:
        if self.n < 2:
            return 0.0
        return self.m2 / (self.n - 1)

    @property
    def stderr(self) -> float:
        if self.n < 2:
            return 0.0
        return math.sqrt(self.variance / self.n)

    @property
    def ci99(self) -> tuple:
        half = STATISTICS['ci_multiplier'] * self.stderr
        return (self.mean - half, self.mean + half)

    def merge(self, other: 'EstimatorReport') -> 'EstimatorReport':
        return merge_reports(self, other)

    def to_dict(self) -> dict:
        lo, hi = self.ci99
        return {
            'key': self.key,
            'n': self.n,
            'mean': self.mean,
            'stderr': self.stderr,
            'ci99': [lo, hi],
            'master_seed': self.master_seed,
            'streams': None if self.streams is None else list(self.streams),
        }


def merge_reports(a: EstimatorReport, b: EstimatorReport) -> EstimatorReport:
    """
    Count-weighted merge of two reports on the same experiment key.

    Args:
        a: First report
        b: Second report

    Returns:
        Report equal (up to rounding) to one built from the pooled samples
    """
    if a.key != b.key:
        logger.error(f"refusing to merge reports {a.key!r} and {b.key!r}")
        raise ReportKeyMismatchError(f"cannot merge reports for {a.key!r} and {b.key!r}")
    if b.n == 0:
        return a if a.streams is not None or b.streams is None else replace(a, streams=b.streams)
    if a.n == 0:
        return b if b.streams is not None or a.streams is None else replace(b, streams=a.streams)
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = a.mean + delta * b.n / n
    m2 = a.m2 + b.m2 + delta * delta * a.n * b.n / n
    streams = a.streams or b.streams
    if a.streams is not None and b.streams is not None:
        streams = (min(a.streams[0], b.streams[0]), max(a.streams[1], b.streams[1]))
    seed = a.master_seed if a.master_seed is not None else b.master_seed
    return EstimatorReport(a.key, n, mean, m2, seed, streams)


def within_stderr(report: EstimatorReport, target: float,
                  multiple: float = STATISTICS['stderr_multiple'], floor: float = 0.0) -> bool:
    """|mean - target| <= max(multiple * stderr, floor)."""
    return abs(report.mean - target) <= max(multiple * report.stderr, floor)


def agree(a: EstimatorReport, b: EstimatorReport, multiple: float = STATISTICS['stderr_multiple'],
          floor: float = 0.0) -> bool:
    """Two estimates agree within the combined standard error (or ``floor``)."""
    combined = math.sqrt(a.stderr ** 2 + b.stderr ** 2)
    return abs(a.mean - b.mean) <= max(multiple * combined, floor)


# ---------------------------------------------------------------------------
# Goodness of fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    statistic: float
    pvalue: float
    dof: int = 0
    bins: int = 0

    def passed(self, threshold: float = STATISTICS['p_threshold']) -> bool:
        return self.pvalue > threshold

    def to_dict(self) -> dict:
        return {'statistic': self.statistic, 'pvalue': self.pvalue, 'dof': self.dof, 'bins': self.bins}


def ks_statistic(samples, cdf: Callable, min_samples: int = STATISTICS['min_samples']) -> FitResult:
    """One-sample Kolmogorov-Smirnov test against a continuous cdf."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < min_samples:
        raise DegenerateInputError(f"KS test needs at least {min_samples} samples, got {samples.size}")
    if not np.all(np.isfinite(samples)):
        raise DegenerateInputError("KS test samples must be finite")
    result = stats.kstest(samples, cdf)
    return FitResult(float(result.statistic), float(result.pvalue), bins=int(samples.size))


def two_sample_ks(a, b, min_samples: int = STATISTICS['min_samples']) -> FitResult:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if min(a.size, b.size) < min_samples:
        raise DegenerateInputError(f"two-sample KS needs {min_samples} samples per side")
    result = stats.ks_2samp(a, b)
    return FitResult(float(result.statistic), float(result.pvalue), bins=int(a.size + b.size))


def merge_low_bins(counts: np.ndarray, expected: np.ndarray, min_expected: float):
    """Merge neighbouring bins until every expected count reaches ``min_expected``."""
    groups, current = [], []
    running = 0.0
    for i, e in enumerate(expected):
        current.append(i)
        running += e
        if running >= min_expected:
            groups.append(current)
            current, running = [], 0.0
    if current:
        if groups:
            groups[-1].extend(current)
        else:
            groups.append(current)
    merged_counts = np.array([counts[g].sum() for g in groups], dtype=float)
    merged_expected = np.array([expected[g].sum() for g in groups], dtype=float)
    if len(groups) < len(expected):
        logger.warning(f"merged {len(expected)} chi-square bins into {len(groups)}")
    return merged_counts, merged_expected


def chi_square(counts, probs, min_expected: float = STATISTICS['min_expected']) -> FitResult:
    """
    Pearson chi-square goodness of fit with dof = bins - 1.

    Zero-probability bins must be empty (otherwise the fit is rejected outright);
    bins with expected count below ``min_expected`` are merged with neighbours.

    Args:
        counts: Observed counts per bin
        probs: Model probabilities per bin, summing to 1
        min_expected: Smallest admissible expected count

    Returns:
        FitResult; a single surviving bin gives statistic 0 and p-value 1
    """
    counts = np.asarray(counts, dtype=float).ravel()
    probs = np.asarray(probs, dtype=float).ravel()
    if counts.shape != probs.shape or counts.size == 0:
        raise DegenerateInputError("counts and probabilities must be non-empty and aligned")
    if np.any(probs < 0.0) or abs(probs.sum() - 1.0) > 1e-9:
        raise DegenerateInputError(f"probabilities must be nonnegative and sum to 1, got sum {probs.sum()!r}")
    total = counts.sum()
    if total <= 0:
        raise DegenerateInputError("chi-square test on zero observations")
    impossible = probs <= 0.0
    if np.any(counts[impossible] > 0):
        logger.warning("observations fall in zero-probability bins")
        return FitResult(math.inf, 0.0, int(np.count_nonzero(~impossible)) - 1, int(counts.size))
    kept_counts = counts[~impossible]
    expected = probs[~impossible] / probs[~impossible].sum() * total
    kept_counts, expected = merge_low_bins(kept_counts, expected, min_expected)
    if kept_counts.size < 2:
        return FitResult(0.0, 1.0, 0, 1)
    result = stats.chisquare(kept_counts, expected)
    return FitResult(float(result.statistic), float(result.pvalue), int(kept_counts.size - 1), int(kept_counts.size))


def independence_test(table, min_row: int = STATISTICS['min_samples']) -> FitResult:
    """
    Chi-square test that the columns (outcomes) are independent of the rows (strata).

    Rows with fewer than ``min_row`` observations and empty columns are dropped.
    """
    table = np.asarray(table, dtype=float)
    rows = table.sum(axis=1) >= min_row
    if np.count_nonzero(~rows):
        logger.warning(f"dropping {int(np.count_nonzero(~rows))} strata with fewer than {min_row} samples")
    table = table[rows]
    if table.shape[0] < 2:
        raise DegenerateInputError("independence test needs at least two populated strata")
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] < 2:
        return FitResult(0.0, 1.0, 0, int(table.size))
    result = stats.chi2_contingency(table, correction=False)
    return FitResult(float(result[0]), float(result[1]), int(result[2]), int(table.size))


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DegenerateInputError(f"distributions of shapes {p.shape} and {q.shape}")
    return 0.5 * float(np.sum(np.abs(p - q)))


# ---------------------------------------------------------------------------
# Convergence slopes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlopeReport:
    """Least-squares fit of log(error) against log(h)."""

    points: tuple
    slope: float
    intercept: float
    passed: bool
    dropped: tuple = ()
    note: str = ''

    def to_dict(self) -> dict:
        return {
            'points': [list(p) for p in self.points],
            'slope': self.slope,
            'intercept': self.intercept,
            'passed': self.passed,
            'dropped': list(self.dropped),
            'note': self.note,
        }


def fit_slope(points: Sequence, band: tuple = SLOPE_BAND, exact_tol: float = 0.0) -> SlopeReport:
    """
    Fit the convergence order of err(h) ~ C h^p.

    Args:
        points: (h, error) pairs
        band: Accepted slope interval
        exact_tol: Error level treated as exact agreement (all points below it pass)

    Returns:
        SlopeReport with the fitted slope
    """
    pts = sorted(((float(h), float(e)) for h, e in points), key=lambda p: -p[0])
    hs = np.array([p[0] for p in pts])
    if np.any(hs <= 0.0) or np.any(np.diff(hs) >= 0.0):
        raise DegenerateInputError("step sizes must be positive and distinct")
    errors = np.array([p[1] for p in pts])
    if exact_tol > 0.0 and np.all(errors <= exact_tol):
        return SlopeReport(tuple(pts), math.nan, math.nan, True, note='exact agreement at every step')
    keep = errors > 0.0
    dropped = tuple(h for h, e in pts if e <= 0.0)
    if dropped:
        logger.debug(f"dropping zero-error steps {dropped}")
    if np.count_nonzero(keep) < 3:
        raise DegenerateInputError("slope fit needs at least three nonzero errors")
    slope, intercept = np.polyfit(np.log(hs[keep]), np.log(errors[keep]), 1)
    passed = band[0] <= slope <= band[1]
    return SlopeReport(tuple(pts), float(slope), float(intercept), bool(passed), dropped,
                       'exact cancellation at dropped steps' if dropped else '')


# ---------------------------------------------------------------------------
# Replication runner
# ---------------------------------------------------------------------------

def chunk_plan(n: int, rng: RngStream, chunk_size: int = SIMULATION_CONFIG['chunk_size']) -> list:
    """(count, stream) per chunk; chunk c always draws from stream ``rng.offset(c)``."""
    if n < 1:
        raise ValueError(f"need at least one replication, got {n}")
    chunks = int(math.ceil(n / chunk_size))
    return [(min(chunk_size, n - c * chunk_size), rng.offset(c)) for c in range(chunks)]


def run_chunks(worker: Callable, n: int, rng: RngStream, jobs: int = 1,
               chunk_size: int = SIMULATION_CONFIG['chunk_size']) -> list:
    """
    Run ``worker(count, stream)`` over every chunk and return the outputs in chunk order.

    The chunk-to-stream mapping does not depend on ``jobs``, so results are
    identical for any degree of parallelism. Workers must be picklable when
    ``jobs > 1``.
    """
    plan = chunk_plan(n, rng, chunk_size)
    logger.debug(f"running {n} replications in {len(plan)} chunks on {jobs} process(es)")
    if jobs > 1 and len(plan) > 1:
        with multiprocessing.Pool(processes=min(jobs, len(plan))) as pool:
            return pool.starmap(worker, plan)
    return [worker(count, stream) for count, stream in plan]


def run_replications(worker: Callable, n: int, rng: RngStream, key: str, jobs: int = 1,
                     chunk_size: int = SIMULATION_CONFIG['chunk_size']) -> EstimatorReport:
    """
    Merge per-chunk reports of a scalar Monte Carlo estimator.

    Args:
        worker: ``worker(count, stream) -> array of count values``
        n: Number of replications
        rng: Base stream; chunks use consecutive stream ids
        key: Experiment key
        jobs: Worker processes
        chunk_size: Replications per chunk

    Returns:
        The merged EstimatorReport
    """
    outputs = run_chunks(worker, n, rng, jobs, chunk_size)
    report = EstimatorReport.empty(key)
    offset = 0
    for (count, stream), values in zip(chunk_plan(n, rng, chunk_size), outputs):
        part = EstimatorReport.from_samples(key, values, rng.master_seed, stream.stream_id, offset)
        report = merge_reports(report, part)
        offset += count
    return report


def raise_slope_failure(name: str, report: SlopeReport):
    """Log the (h, error) table and raise TheoremCheckFailure."""
    table = ', '.join(f"({h:g}, {e:.3e})" for h, e in report.points)
    logger.error(f"{name}: slope {report.slope:.3f} outside {SLOPE_BAND}; (h, error) = {table}")
    raise TheoremCheckFailure(f"{name}: slope {report.slope:.3f} outside {SLOPE_BAND}", report.to_dict())
