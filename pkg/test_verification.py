"""
Tests for estimator reports, goodness-of-fit helpers and slope fits
"""

import logging
import math

import numpy as np
import pytest
from scipy import stats

from errors import DegenerateInputError, EstimatorAbortError, ReportKeyMismatchError, TheoremCheckFailure
from process_models import RngStream
from verification import (
    EstimatorReport,
    agree,
    chi_square,
    chunk_plan,
    fit_slope,
    independence_test,
    ks_statistic,
    merge_low_bins,
    merge_reports,
    raise_slope_failure,
    run_replications,
    total_variation,
    within_stderr,
)

logger = logging.getLogger(__name__)


def uniform_worker(count, stream):
    return stream.generator().random(count)


def test_report_matches_numpy():
    values = np.random.default_rng(1).normal(2.0, 3.0, size=500)
    report = EstimatorReport.from_samples('k', values)
    assert report.n == 500
    assert report.mean == pytest.approx(values.mean())
    assert report.variance == pytest.approx(values.var(ddof=1))
    assert report.stderr == pytest.approx(values.std(ddof=1) / math.sqrt(500))
    lo, hi = report.ci99
    assert lo < report.mean < hi
    logger.info("✓ report matches numpy")


def test_merge_equals_pooled():
    values = np.random.default_rng(2).exponential(size=1001)
    pooled = EstimatorReport.from_samples('k', values, stream=0)
    a = EstimatorReport.from_samples('k', values[:300], stream=0)
    b = EstimatorReport.from_samples('k', values[300:], stream=4)
    merged = merge_reports(a, b)
    assert merged.n == pooled.n
    assert merged.mean == pytest.approx(pooled.mean, abs=1e-12)
    assert merged.m2 == pytest.approx(pooled.m2, rel=1e-10)
    assert merged.streams == (0, 4)
    assert merge_reports(EstimatorReport.empty('k'), a) == a
    logger.info("✓ merge equals pooled")


def test_merge_refuses_foreign_keys():
    with pytest.raises(ReportKeyMismatchError):
        merge_reports(EstimatorReport.from_samples('a', [1.0, 2.0]), EstimatorReport.from_samples('b', [1.0]))
    logger.info("✓ merge refuses foreign keys")


def test_non_finite_replication_aborts():
    with pytest.raises(EstimatorAbortError) as info:
        EstimatorReport.from_samples('k', [1.0, math.inf, 2.0], offset=10)
    assert info.value.replication == 11
    logger.info("✓ non finite replication aborts")


def test_within_stderr_floor():
    exact = EstimatorReport.from_samples('k', [0.5] * 10)
    assert exact.stderr == 0.0
    assert within_stderr(exact, 0.5 + 1e-12, floor=1e-9)
    assert not within_stderr(exact, 0.6, floor=1e-9)
    logger.info("✓ within stderr floor")


def test_chi_square_perfect_fit():
    result = chi_square([10, 20, 30], [1 / 6, 2 / 6, 3 / 6])
    assert result.statistic == pytest.approx(0.0, abs=1e-12)
    assert result.pvalue == pytest.approx(1.0)
    assert result.dof == 2
    logger.info("✓ chi square perfect fit")


def test_chi_square_impossible_bin():
    result = chi_square([10, 5, 1], [0.6, 0.4, 0.0])
    assert result.pvalue == 0.0
    assert not result.passed()
    logger.info("✓ chi square impossible bin")


def test_chi_square_rejects_bad_probabilities():
    with pytest.raises(DegenerateInputError):
        chi_square([1, 2], [0.5, 0.6])
    logger.info("✓ chi square rejects bad probabilities")


def test_merge_low_bins():
    counts, expected = merge_low_bins(np.array([1, 2, 30, 1]), np.array([1.0, 2.0, 30.0, 1.0]), 5.0)
    # the light tail bin is folded into the last full group
    assert counts.tolist() == [34.0]
    assert expected.sum() == pytest.approx(34.0)
    logger.info("✓ merge low bins")


def test_ks_accepts_and_rejects():
    samples = RngStream(9).generator().random(2000)
    assert ks_statistic(samples, stats.uniform.cdf).passed()
    assert ks_statistic(samples + 0.5, stats.uniform.cdf).pvalue < 1e-6
    with pytest.raises(DegenerateInputError):
        ks_statistic(samples[:10], stats.uniform.cdf)
    logger.info("✓ ks accepts and rejects")


def test_independence_test():
    assert independence_test([[50, 50], [50, 50]]).pvalue == pytest.approx(1.0)
    assert independence_test([[90, 10], [10, 90]]).pvalue < 1e-6
    with pytest.raises(DegenerateInputError):
        independence_test([[50, 50], [5, 5]])
    logger.info("✓ independence test")


def test_total_variation():
    assert total_variation([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert total_variation([0.25, 0.75], [0.25, 0.75]) == 0.0
    logger.info("✓ total variation")


def test_slope_fit_orders():
    hs = [0.1, 0.05, 0.025, 0.0125]
    first = fit_slope([(h, 3.0 * h) for h in hs])
    assert first.slope == pytest.approx(1.0)
    assert first.passed
    second = fit_slope([(h, h * h) for h in hs])
    assert second.slope == pytest.approx(2.0)
    assert not second.passed
    with pytest.raises(TheoremCheckFailure):
        raise_slope_failure('second-order', second)
    logger.info("✓ slope fit orders")


def test_slope_fit_edge_cases():
    hs = [0.1, 0.05, 0.025, 0.0125]
    exact = fit_slope([(h, 1e-15) for h in hs], exact_tol=1e-12)
    assert exact.passed and math.isnan(exact.slope)
    dropped = fit_slope([(0.1, 0.2), (0.05, 0.1), (0.025, 0.0), (0.0125, 0.025)])
    assert dropped.dropped == (0.025,)
    assert dropped.passed
    with pytest.raises(DegenerateInputError):
        fit_slope([(0.1, 0.1), (0.05, 0.0), (0.025, 0.0)])
    logger.info("✓ slope fit edge cases")


def test_chunks_are_addressed_by_stream():
    plan = chunk_plan(5000, RngStream(4, 100), chunk_size=2048)
    assert [count for count, _ in plan] == [2048, 2048, 904]
    assert [s.stream_id for _, s in plan] == [100, 101, 102]
    logger.info("✓ chunks are addressed by stream")


def test_replications_are_reproducible():
    a = run_replications(uniform_worker, 5000, RngStream(4, 100), 'u')
    b = run_replications(uniform_worker, 5000, RngStream(4, 100), 'u')
    assert a == b
    assert a.n == 5000
    assert a.streams == (100, 102)
    assert within_stderr(a, 0.5, multiple=4.0)
    logger.info("✓ replications are reproducible")


def test_agree_uses_combined_stderr():
    a = EstimatorReport.from_samples('a', [0.0, 2.0] * 50)
    b = EstimatorReport.from_samples('b', [0.2, 2.2] * 50)
    combined = math.hypot(a.stderr, b.stderr)
    assert agree(a, b, multiple=0.2 / combined + 0.01)
    assert not agree(a, b, multiple=0.2 / combined - 0.01)
    flat = EstimatorReport.from_samples('c', [1.0] * 10)
    assert agree(flat, EstimatorReport.from_samples('d', [1.0 + 1e-12] * 10), floor=1e-9)
    logger.info("✓ agree respects the combined stderr and the floor")
