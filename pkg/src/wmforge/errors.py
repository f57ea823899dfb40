"""Exception hierarchy shared across the package."""


class WmForgeError(Exception):
    """Base class for all package errors."""


class ConfigError(WmForgeError):
    """Invalid model, key, or experiment configuration."""


class ShapeError(WmForgeError, ValueError):
    """Tensor or key shape does not match what the operation expects."""


class NumericalError(WmForgeError):
    """A non-finite value appeared during a trajectory."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ConvergenceError(WmForgeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class InfeasibleError(WmForgeError, ValueError):
    """No threshold satisfies the requested false-positive rate."""


class OptimizationError(WmForgeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace
