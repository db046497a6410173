"""
Exceptions raised across the toolkit, grouped by the CLI exit code they map to.
"""


class MspliceError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class InvalidKernelError(MspliceError, ValueError):
    """A kernel or rate matrix violates its row-sum / sign invariants."""


class DimensionMismatchError(MspliceError, ValueError):
    """Vector and matrix sizes disagree."""


class SemigroupViolationError(MspliceError):
    """A kernel family fails Chapman-Kolmogorov at a grid pair (s, t)."""

    def __init__(self, s: float, t: float, deviation: float, tolerance: float):
        self.s = s
        self.t = t
        self.deviation = deviation
        super().__init__(
            f"semigroup property violated at (s={s}, t={t}): "
            f"deviation {deviation:.3e} > {tolerance:.1e}"
        )


class PathDomainError(MspliceError, ValueError):
    """A path was queried outside [0, horizon]."""


class PathBlowupError(MspliceError):
    """An Euler-Maruyama path produced a non-finite value."""

    def __init__(self, time: float, value: float):
        self.time = time
        self.value = value
        super().__init__(f"path blew up at t={time}: value {value}")


class RateBoundError(MspliceError, ValueError):
    """A killing rate evaluated outside [0, c_max]."""

    def __init__(self, value: float, c_max: float):
        self.value = value
        self.c_max = c_max
        super().__init__(f"rate value {value} outside [0, {c_max}]")


class EstimatorAbortError(MspliceError):
    """A Monte Carlo estimator met a non-finite or unbounded integrand value."""

    def __init__(self, value, replication: int):
        self.value = value
        self.replication = replication
        super().__init__(f"estimator aborted at replication {replication}: offending value {value}")


class ConfigurationError(MspliceError, ValueError):
    """Inconsistent block / transfer configuration."""

    exit_code = 2


class ZeroLifetimeError(MspliceError):
    """A block was killed at time 0, which the revival construction forbids."""

    def __init__(self, block: int, start):
        self.block = block
        self.start = start
        super().__init__(f"block {block} started at {start} has zero lifetime")


class NoUniqueInvariantError(MspliceError):
    """The restore chain is reducible."""


class ReportKeyMismatchError(MspliceError, ValueError):
    """Two estimator reports from different experiments were merged."""


class DegenerateInputError(MspliceError, ValueError):
    """Statistical routine received inputs it cannot test."""


class TheoremCheckFailure(MspliceError):
    """A theorem check did not pass its configured tolerance."""

    def __init__(self, message: str, details=None):
        self.details = details
        super().__init__(message)


class ConfigSchemaError(MspliceError, ValueError):
    """An experiment config does not match the schema."""

    exit_code = 2

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")
