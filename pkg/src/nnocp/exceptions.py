"""Exception types shared across the package."""


class SolverError(RuntimeError):
    """A linear or nonlinear solve failed (singular system, divergence)."""


class DivergenceError(SolverError):
    """An iteration produced non-finite values."""


class TrainingError(RuntimeError):
    """Network training failed; carries the partial report when available."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(ValueError):
    """Invalid or unknown configuration input."""
