"""Shared exception types.

Every error raised on purpose by this package derives from PocoError so the
CLI can map failures to one-line machine-parseable messages.
"""


class PocoError(Exception):
    """Base class for all package errors."""


class ContractViolation(PocoError, ValueError):
    """An API precondition or invariant was violated by the caller."""


class FormatError(PocoError, ValueError):
    """A serialized artifact (frame, checkpoint, index, manifest) is malformed."""


class TrainingAborted(PocoError, RuntimeError):
    """Training stopped early (e.g. non-finite loss); last good checkpoint is kept."""
