"""Exception types shared across the package."""


class AtlasError(Exception):
    """Base class for all package errors."""


class ValidationError(AtlasError, ValueError):
    """Input failed a shape, range or finiteness check."""


class ConvergenceError(AtlasError, RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class DegenerateError(AtlasError, ValueError):
    """A statistic or normalizer is undefined for the given input."""


class TrainingError(AtlasError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, breakdown=None):
        detail = message
        if step is not None:
            detail += f" at step {step}"
        if breakdown:
            terms = ", ".join(f"{k}={v:.6g}" for k, v in breakdown.items())
            detail += f" [{terms}]"
        super().__init__(detail)
        self.step = step
        self.breakdown = dict(breakdown or {})


class ConfigError(ValidationError):
    """A configuration document has unknown keys or bad values."""


class EmptyReportError(AtlasError):
    """No result files were found to aggregate."""
