"""Exception types raised across the package."""


class ParameterError(ValueError):
    """An argument is outside its documented domain."""


class ContractError(ValueError):
    """A precondition on an input array does not hold."""


class ConsistencyError(ValueError):
    """An advantage table violates the normalization condition."""


class SizeError(ValueError):
    """An instance is too large for the requested operation."""


class SolverError(RuntimeError):
    """Soft value iteration did not converge."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(ValueError):
    """An experiment configuration failed validation."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage, error):
        super().__init__(f"[{stage}] {type(error).__name__}: {error}")
        self.stage = stage
