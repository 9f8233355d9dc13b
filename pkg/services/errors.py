class LatarbError(Exception):
    """Base class for all pipeline errors"""


class ValidationError(LatarbError, ValueError):
    """Invalid input data, configuration or artifact state"""


class InsufficientDepthError(ValidationError):
    """Requested quantity exceeds the depth of the ladder"""


class InsufficientHistoryError(ValidationError):
    """No past observations are available for an estimate"""


class ConvergenceError(LatarbError, RuntimeError):
    """Optimizer or root search failed to converge"""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        if not self.diagnostics:
            return super().__str__()
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{super().__str__()} ({details})"


class SimulationError(LatarbError, RuntimeError):
    """Monte Carlo run cannot produce a valid estimate"""
