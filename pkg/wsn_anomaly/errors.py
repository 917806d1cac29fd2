"""
Exception hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI uses when it escapes a command.
Validation-type errors subclass ValueError so callers can catch them generically.
"""
from __future__ import annotations

from typing import Optional


class WsnAnomalyError(Exception):
    exit_code: int = 1


class ValidationFailure(WsnAnomalyError, ValueError):
    exit_code = 2


class ConfigError(ValidationFailure):
    pass


class DataError(ValidationFailure):
    pass


class ShapeError(ValidationFailure):
    pass


class LengthError(ValidationFailure):
    pass


class GapError(DataError):
    """A (node, modality) pair has no records at all."""

    def __init__(self, node: int, modality: str) -> None:
        self.node = node
        self.modality = modality
        super().__init__(f"Unrecoverable gap: no records for node {node}, modality '{modality}'")


class BoundaryError(DataError):
    """An empty interval has no record on one of its sides."""


class BudgetError(ValidationFailure):
    pass


class EpisodeError(ValidationFailure):
    pass


class ShortageError(ValidationFailure):
    def __init__(self, requested: int, available: int, what: str = "entries") -> None:
        self.requested = requested
        self.available = available
        super().__init__(f"Requested {requested} {what} but only {available} available")


class StateError(ValidationFailure):
    pass


class LossError(ValidationFailure):
    pass


class AlignmentError(ValidationFailure):
    pass


class WarmupError(ValidationFailure):
    def __init__(self, remaining: int) -> None:
        self.remaining = remaining
        super().__init__(f"Stream is cold: {remaining} more step(s) required before an embedding is available")


class CompatibilityError(WsnAnomalyError):
    exit_code = 3

    def __init__(self, message: str, diff: Optional[dict] = None) -> None:
        self.diff = diff or {}
        if self.diff:
            lines = [f"  {key}: expected {exp!r}, found {got!r}" for key, (exp, got) in sorted(self.diff.items())]
            message = message + "\n" + "\n".join(lines)
        super().__init__(message)


class DivergenceError(WsnAnomalyError):
    exit_code = 4

    def __init__(self, epoch: int, step: int, value: float) -> None:
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(f"Non-finite loss {value} at epoch {epoch}, step {step}")
