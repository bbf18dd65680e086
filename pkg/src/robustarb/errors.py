"""Exception hierarchy shared by all engines."""

from __future__ import annotations

from typing import Any


class RobustArbError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(RobustArbError, ValueError):
    """A model, grid or run configuration is invalid."""


class DomainError(RobustArbError, ValueError):
    """A state lies outside the open positive orthant."""


class UsageError(RobustArbError, ValueError):
    """An operation was called with arguments it cannot handle."""


class SimulationAbort(RobustArbError, RuntimeError):
    """The simulator hit a non-finite value and stopped.

    ``state`` carries the offending step index, path indices and the
    capitalizations at which the coefficients were evaluated.
    """

    def __init__(self, message: str, state: dict[str, Any] | None = None):
        super().__init__(message)
        self.state = state or {}


class CFLViolation(RobustArbError, ValueError):
    """The explicit time step exceeds the monotonicity bound at some node."""

    def __init__(self, message: str, node: tuple[int, ...] | None = None):
        super().__init__(message)
        self.node = node
