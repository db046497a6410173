"""
Sub-Markov kernels on finite state spaces and their one-point extensions by a
cemetery state.

The cemetery is always the last matrix index: an ExtKernel over a tag of size n
is an (n+1)x(n+1) row-stochastic matrix whose last row is the unit vector on
the cemetery.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from config import TOLERANCES
from errors import DimensionMismatchError, InvalidKernelError, SemigroupViolationError

logger = logging.getLogger(__name__)

ROW_TOL = TOLERANCES['row_sum']


@dataclass(frozen=True)
class StateSpaceTag:
    """Label of one state space E_i.

    ``size`` is the number of alive states; ``None`` marks the real line used by
    diffusion blocks. Distinct blocks carry distinct ids, which keeps their state
    spaces disjoint without any set arithmetic.
    """

    id: int
    size: Optional[int]
    labels: tuple = ()

    def __post_init__(self):
        if self.size is not None and self.size < 1:
            raise ValueError(f"state space {self.id} must have at least one state, got size {self.size}")
        if self.labels and self.size is not None and len(self.labels) != self.size:
            raise ValueError(f"state space {self.id}: {len(self.labels)} labels for {self.size} states")

    @property
    def is_finite(self) -> bool:
        return self.size is not None

    def label(self, index: int) -> str:
        if self.labels:
            return str(self.labels[index])
        return str(index)


def real_line(tag_id: int = 0) -> StateSpaceTag:
    """Tag for a block living on the real line."""
    return StateSpaceTag(id=tag_id, size=None)


@dataclass(frozen=True)
class Alive:
    """An alive point: a state index for finite spaces, a real for the line."""

    tag: StateSpaceTag
    point: Union[int, float]


@dataclass(frozen=True)
class Dead:
    """The cemetery state."""

    def __repr__(self) -> str:
        return 'Dead'


DEAD = Dead()
ExtState = Union[Alive, Dead]


def is_dead(state: ExtState) -> bool:
    return isinstance(state, Dead)


def _as_readonly(matrix) -> np.ndarray:
    arr = np.array(matrix, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SubKernel:
    """Row-substochastic matrix over a finite tagged state space."""

    matrix: np.ndarray
    tag: StateSpaceTag

    def __post_init__(self):
        arr = _as_readonly(self.matrix)
        object.__setattr__(self, 'matrix', arr)
        n = self.tag.size
        if n is None:
            raise InvalidKernelError(f"kernels need a finite state space, tag {self.tag.id} is the real line")
        if arr.shape != (n, n):
            raise InvalidKernelError(f"kernel shape {arr.shape} does not match tag size {n}")
        if not np.all(np.isfinite(arr)):
            raise InvalidKernelError("kernel has non-finite entries")
        if np.any(arr < 0.0) or np.any(arr > 1.0 + ROW_TOL):
            raise InvalidKernelError("kernel entries must lie in [0, 1]")
        row_sums = arr.sum(axis=1)
        worst = int(np.argmax(row_sums))
        if row_sums[worst] > 1.0 + ROW_TOL:
            raise InvalidKernelError(f"row {worst} sums to {row_sums[worst]!r} > 1 + {ROW_TOL}")

    @property
    def size(self) -> int:
        return self.tag.size

    def mass(self) -> np.ndarray:
        """kappa(x, E) for every alive x."""
        return self.matrix.sum(axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SubKernel):
            return NotImplemented
        return self.tag == other.tag and np.array_equal(self.matrix, other.matrix)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ExtKernel:
    """Markov kernel on E* = E + {Delta}; Delta is the last index and a trap."""

    matrix: np.ndarray
    tag: StateSpaceTag

    def __post_init__(self):
        arr = _as_readonly(self.matrix)
        object.__setattr__(self, 'matrix', arr)
        n = self.tag.size
        if n is None or arr.shape != (n + 1, n + 1):
            raise InvalidKernelError(f"extended kernel shape {arr.shape} does not match tag size {n} + 1")
        if np.any(arr < 0.0):
            raise InvalidKernelError("extended kernel has negative entries")
        deviation = np.abs(arr.sum(axis=1) - 1.0)
        if np.max(deviation) > ROW_TOL:
            raise InvalidKernelError(f"extended kernel row {int(np.argmax(deviation))} does not sum to 1")
        cemetery_row = np.zeros(n + 1)
        cemetery_row[-1] = 1.0
        if not np.array_equal(arr[-1], cemetery_row):
            raise InvalidKernelError("cemetery row must be the unit vector on Delta")

    @property
    def size(self) -> int:
        return self.tag.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExtKernel):
            return NotImplemented
        return self.tag == other.tag and np.array_equal(self.matrix, other.matrix)

    __hash__ = None


def extend_kernel(k: SubKernel) -> ExtKernel:
    """
    One-point extension kappa* of a sub-Markov kernel.

    Alive rows become [kappa(x, .), 1 - kappa(x, E)], the cemetery row is the
    unit vector on Delta.

    Args:
        k: Sub-Markov kernel

    Returns:
        The extended Markov kernel
    """
    n = k.size
    row_sums = k.mass()
    if np.any(row_sums > 1.0 + ROW_TOL):
        raise InvalidKernelError(f"row sums {row_sums} exceed 1 + {ROW_TOL}")
    ext = np.zeros((n + 1, n + 1))
    ext[:n, :n] = k.matrix
    ext[:n, n] = np.maximum(1.0 - row_sums, 0.0)
    ext[n, n] = 1.0
    return ExtKernel(ext, k.tag)


def restrict_kernel(k: ExtKernel) -> SubKernel:
    """Alive block of an extended kernel."""
    n = k.size
    return SubKernel(k.matrix[:n, :n].copy(), k.tag)


def extend_function(f, tag: StateSpaceTag) -> np.ndarray:
    """Extend f to E* by f*(Delta) = 0."""
    f = np.asarray(f, dtype=float)
    if f.shape != (tag.size,):
        raise DimensionMismatchError(f"function of length {f.shape} on a space of size {tag.size}")
    return np.append(f, 0.0)


def restrict_function(fstar) -> np.ndarray:
    return np.asarray(fstar, dtype=float)[:-1]


def apply_extended(k: ExtKernel, fstar) -> np.ndarray:
    """
    kappa* f* as a plain matrix-vector product.

    Args:
        k: Extended kernel
        fstar: Vector over E* (cemetery last)

    Returns:
        Vector over E*
    """
    fstar = np.asarray(fstar, dtype=float)
    if fstar.shape != (k.size + 1,):
        raise DimensionMismatchError(f"vector of shape {fstar.shape} for an extended kernel of size {k.size} + 1")
    return k.matrix @ fstar


def extension_identity_rhs(k: SubKernel, fstar) -> np.ndarray:
    """kappa(f*|_E - f*(Delta)) + f*(Delta) on alive rows, f*(Delta) on the cemetery."""
    fstar = np.asarray(fstar, dtype=float)
    if fstar.shape != (k.size + 1,):
        raise DimensionMismatchError(f"vector of shape {fstar.shape} for a kernel of size {k.size}")
    tail = fstar[-1]
    alive = k.matrix @ (fstar[:-1] - tail) + tail
    return np.append(alive, tail)


def extension_identity_deviation(k: SubKernel, fstar) -> float:
    """Sup-norm gap between kappa* f* and the one-point extension identity."""
    lhs = apply_extended(extend_kernel(k), fstar)
    return float(np.max(np.abs(lhs - extension_identity_rhs(k, fstar))))


def _chapman_kolmogorov_pairs(times: Sequence[float]):
    """Index triples (i, j, l) with times[i] + times[j] == times[l] up to rounding."""
    times = np.asarray(times, dtype=float)
    for i, s in enumerate(times):
        for j, t in enumerate(times):
            target = s + t
            hits = np.flatnonzero(np.abs(times - target) <= 1e-12 * max(1.0, abs(target)))
            if hits.size:
                yield i, j, int(hits[0])


def check_semigroup(matrices: Sequence[np.ndarray], times: Sequence[float],
                    tolerance: float = TOLERANCES['semigroup']) -> float:
    """
    Verify kappa_{s+t} = kappa_s kappa_t on every grid pair.

    Returns:
        The largest deviation seen

    Raises:
        SemigroupViolationError: on the first offending pair
    """
    worst = 0.0
    for i, j, l in _chapman_kolmogorov_pairs(times):
        deviation = float(np.max(np.abs(matrices[i] @ matrices[j] - matrices[l])))
        if deviation > tolerance:
            logger.error(f"Chapman-Kolmogorov fails at s={times[i]}, t={times[j]}: {deviation:.3e}")
            raise SemigroupViolationError(float(times[i]), float(times[j]), deviation, tolerance)
        worst = max(worst, deviation)
    return worst


def extend_semigroup_step(ks: Sequence[SubKernel], times: Sequence[float],
                          tolerance: float = TOLERANCES['semigroup']) -> list:
    """
    Extend a sub-Markov semigroup sampled on a time grid.

    Args:
        ks: kappa_t for each t in ``times``, all on the same tag
        times: Time grid
        tolerance: Chapman-Kolmogorov tolerance

    Returns:
        List of ExtKernel, one per grid time
    """
    if len(ks) != len(times):
        raise DimensionMismatchError(f"{len(ks)} kernels for {len(times)} times")
    tags = {k.tag for k in ks}
    if len(tags) > 1:
        raise InvalidKernelError(f"kernel family spans several state spaces: {sorted(t.id for t in tags)}")
    check_semigroup([k.matrix for k in ks], times, tolerance)
    extended = [extend_kernel(k) for k in ks]
    check_semigroup([k.matrix for k in extended], times, tolerance)
    logger.debug(f"extended a semigroup family of {len(ks)} kernels")
    return extended


def kernel_to_json(k: Union[SubKernel, ExtKernel]) -> dict:
    """JSON object {"tag": id, "rows": [...]} with "extended": true for ExtKernel."""
    obj = {'tag': k.tag.id, 'rows': k.matrix.tolist()}
    if isinstance(k, ExtKernel):
        obj['extended'] = True
    return obj


def kernel_from_json(obj: dict, tag: Optional[StateSpaceTag] = None) -> Union[SubKernel, ExtKernel]:
    rows = np.array(obj['rows'], dtype=float)
    extended = bool(obj.get('extended', False))
    if tag is None:
        size = rows.shape[0] - 1 if extended else rows.shape[0]
        tag = StateSpaceTag(id=int(obj['tag']), size=size)
    if extended:
        return ExtKernel(rows, tag)
    return SubKernel(rows, tag)
