from typing import Any, Optional, Sequence, Tuple


class PolicySmithError(Exception):
    """Base class for every error raised by the synthesis pipeline."""


# Density construction and evaluation
class AllZero(PolicySmithError, ValueError):
    pass


class NegativeMass(PolicySmithError, ValueError):
    pass


class NotNormalized(PolicySmithError, ValueError):
    pass


class NonFiniteH(PolicySmithError, ValueError):
    pass


class BadAxis(PolicySmithError, ValueError):
    pass


class AbsContinuityViolation(PolicySmithError, ValueError):
    """f puts mass on a cell where g has none; `cell` names where it happened."""

    def __init__(self, message: str, cell: Optional[Tuple[Any, ...]] = None):
        super().__init__(message)
        self.cell = cell


# Constraints and projection
class EmptyInterval(PolicySmithError, ValueError):
    pass


class DegenerateSupport(PolicySmithError, ValueError):
    pass


class InfeasibleConstraints(PolicySmithError):
    """No pdf satisfies the equalities and the inequalities strictly.

    `slack` is the best minimum inequality slack found (None when even the
    equalities cannot be met).
    """

    def __init__(self, message: str, slack: Optional[float] = None,
                 stage: Optional[int] = None, state: Optional[int] = None):
        super().__init__(message)
        self.slack = slack
        self.stage = stage
        self.state = state


class NotConverged(PolicySmithError):
    def __init__(self, message: str, cells: Sequence[Tuple[int, ...]] = (), report: Any = None):
        super().__init__(message)
        self.cells = list(cells)
        self.report = report


# Data ingestion and artifacts
class NoInRangeSamples(PolicySmithError, ValueError):
    pass


class RankDeficient(PolicySmithError, ValueError):
    pass


class ArtifactIOError(PolicySmithError, OSError):
    pass


class SchemaVersionMismatch(PolicySmithError):
    pass


class ChecksumMismatch(PolicySmithError):
    pass


class ConfigError(PolicySmithError, ValueError):
    pass
