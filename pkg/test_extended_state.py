"""
Tests for sub-Markov kernels and their cemetery extensions
"""

import logging

import numpy as np
import pytest

from errors import DimensionMismatchError, InvalidKernelError, SemigroupViolationError
from extended_state import (
    ExtKernel,
    StateSpaceTag,
    SubKernel,
    apply_extended,
    check_semigroup,
    extend_function,
    extend_kernel,
    extend_semigroup_step,
    extension_identity_deviation,
    kernel_from_json,
    kernel_to_json,
    restrict_function,
    restrict_kernel,
)
from process_models import RateModel, ctmc_semigroup_exact

logger = logging.getLogger(__name__)

TAG = StateSpaceTag(0, 2)
KERNEL = SubKernel(np.array([[0.5, 0.2], [0.1, 0.3]]), TAG)
RATES = np.array([[-1.0, 0.6, 0.4], [0.5, -1.2, 0.7], [0.3, 0.9, -1.2]])


def test_extend_kernel_sends_missing_mass_to_cemetery():
    ext = extend_kernel(KERNEL)
    expected = np.array([[0.5, 0.2, 0.3], [0.1, 0.3, 0.6], [0.0, 0.0, 1.0]])
    assert np.allclose(ext.matrix, expected, atol=1e-15)
    assert np.allclose(ext.matrix.sum(axis=1), 1.0, atol=1e-12)
    assert ext.matrix[-1, -1] == 1.0
    logger.info("✓ extension rows are stochastic")


def test_restrict_undoes_extend():
    assert restrict_kernel(extend_kernel(KERNEL)) == KERNEL
    logger.info("✓ restrict undoes extend")


def test_zero_kernel_kills_everything():
    ext = extend_kernel(SubKernel(np.zeros((2, 2)), TAG))
    assert np.array_equal(ext.matrix[:, -1], np.ones(3))
    logger.info("✓ zero kernel kills everything")


@pytest.mark.parametrize('matrix', [
    [[0.7, 0.4], [0.1, 0.1]],
    [[-0.1, 0.5], [0.2, 0.2]],
    [[np.nan, 0.0], [0.0, 0.0]],
])
def test_invalid_subkernel_rejected(matrix):
    with pytest.raises(InvalidKernelError):
        SubKernel(np.array(matrix), TAG)
    logger.info("✓ invalid subkernel rejected")


def test_subkernel_shape_must_match_tag():
    with pytest.raises(InvalidKernelError):
        SubKernel(np.eye(3) * 0.5, TAG)
    logger.info("✓ subkernel shape must match tag")


def test_ext_kernel_needs_trapping_cemetery():
    bad = np.array([[0.5, 0.2, 0.3], [0.1, 0.3, 0.6], [0.5, 0.0, 0.5]])
    with pytest.raises(InvalidKernelError):
        ExtKernel(bad, TAG)
    logger.info("✓ ext kernel needs trapping cemetery")


def test_extension_identity_holds_for_arbitrary_cemetery_value():
    rng = np.random.default_rng(7)
    for _ in range(20):
        fstar = rng.normal(size=3)
        assert extension_identity_deviation(KERNEL, fstar) <= 1e-12
    logger.info("✓ extension identity holds for arbitrary cemetery value")


def test_extended_functions_vanish_on_cemetery():
    fstar = extend_function([1.0, 2.0], TAG)
    assert fstar.tolist() == [1.0, 2.0, 0.0]
    assert restrict_function(fstar).tolist() == [1.0, 2.0]
    # kappa* f* restricted to E equals kappa f when f*(cemetery) = 0
    ext = extend_kernel(KERNEL)
    assert np.allclose(apply_extended(ext, fstar)[:2], KERNEL.matrix @ np.array([1.0, 2.0]))
    logger.info("✓ extended functions vanish on cemetery")


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        extend_function([1.0, 2.0, 3.0], TAG)
    with pytest.raises(DimensionMismatchError):
        apply_extended(extend_kernel(KERNEL), [1.0, 2.0])
    logger.info("✓ dimension mismatch")


def test_state_space_tag_validation():
    with pytest.raises(ValueError):
        StateSpaceTag(1, 0)
    with pytest.raises(ValueError):
        StateSpaceTag(1, 2, ('a', 'b', 'c'))
    assert StateSpaceTag(1, 2, ('a', 'b')).label(1) == 'b'
    logger.info("✓ state space tag validation")


def test_extended_semigroup_keeps_chapman_kolmogorov():
    tag = StateSpaceTag(0, 3)
    model = RateModel(RATES, tag)
    rates = np.array([0.5, 0.0, 1.5])
    times = [0.25, 0.5, 0.75, 1.0]
    ks = [ctmc_semigroup_exact(model, rates, t) for t in times]
    extended = extend_semigroup_step(ks, times, tolerance=1e-9)
    assert len(extended) == len(times)
    for ext in extended:
        assert ext.matrix[-1].tolist() == [0.0, 0.0, 0.0, 1.0]
    assert check_semigroup([e.matrix for e in extended], times, 1e-9) <= 1e-9
    logger.info("✓ extended semigroup keeps chapman kolmogorov")


def test_check_semigroup_reports_offending_pair():
    tag = StateSpaceTag(0, 3)
    model = RateModel(RATES, tag)
    times = [0.5, 1.0]
    matrices = [ctmc_semigroup_exact(model, None, 0.5).matrix, np.eye(3)]
    with pytest.raises(SemigroupViolationError) as info:
        check_semigroup(matrices, times, 1e-9)
    assert info.value.s == 0.5
    assert info.value.t == 0.5
    assert info.value.deviation > 1e-9
    logger.info("✓ check semigroup reports offending pair")


def test_kernel_json_round_trip():
    assert kernel_from_json(kernel_to_json(KERNEL)) == KERNEL
    ext = extend_kernel(KERNEL)
    obj = kernel_to_json(ext)
    assert obj['extended'] is True
    assert kernel_from_json(obj) == ext
    logger.info("✓ kernel json round trip")
