"""Exception hierarchy shared by every stage.

Each branch maps onto one CLI exit code so scripted callers can tell
bad flags from bad data from a dead backend from a numerical blow-up.
"""

from __future__ import annotations


class CrossKTError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(CrossKTError):
    """Invalid configuration: unknown keys, out-of-range values, bad flags."""

    exit_code = 2


class DataError(CrossKTError):
    """Invalid input data: parse failures, schema violations, broken invariants."""

    exit_code = 3


class EmptyDatasetError(DataError):
    """Every learner was filtered out, or a requested split has no learners."""


class BackendError(CrossKTError):
    """A text backend failed: unreachable endpoint, malformed reply, missing fixture."""

    exit_code = 4


class NumericalError(CrossKTError):
    """A numeric operation produced NaN/Inf or was called on incompatible shapes."""

    exit_code = 5


class UndefinedAUCError(NumericalError):
    """AUC requested for a label set containing only one class."""
