"""Exception types shared across the package."""

from __future__ import annotations


class InvalidParameterError(ValueError):
    """Raised when an operation is called outside its contract."""


class SolverFailureError(RuntimeError):
    """Linear solve did not reach the requested tolerance.

    Carries the residual history for post-mortem inspection.
    """

    def __init__(self, message: str, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class DiscretizationInconsistencyError(RuntimeError):
    """A discrete compatibility condition (e.g. zero-mean drift) failed."""


class SimulationBlowupError(RuntimeError):
    """Path simulation produced a non-finite state."""

    def __init__(self, message: str, step_index: int):
        super().__init__(message)
        self.step_index = step_index


class TruncationRadiusError(RuntimeError):
    """Lattice-sum truncation error exceeded its budget; enlarge the radius."""


class ConfigParseError(ValueError):
    """Configuration text could not be parsed."""
