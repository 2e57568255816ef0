"""Exception types raised across the package."""


class SrnetError(Exception):
    """Base class for all errors raised by srnet."""


class NumericalFailure(SrnetError):
    """A numerical routine failed to converge or produced non-finite values."""


class UndefinedStableRankError(NumericalFailure, ZeroDivisionError):
    """Stable rank requested for a matrix with zero spectral norm."""


class PreconditionError(SrnetError, ValueError):
    """An argument violates a documented precondition."""


class RejectionBudgetExhausted(NumericalFailure):
    """Rejection sampler hit its attempt cap without accepting a sample."""

    def __init__(self, attempts, message=None):
        self.attempts = attempts
        super().__init__(
            message
            or f"no sample accepted after {attempts} attempts; target stable rank "
            "is probably too close to the minimal layer dimension"
        )


class InfeasibleProjectionError(NumericalFailure):
    """Matrix rank is too small to reach the requested stable rank."""


class PSDViolation(NumericalFailure):
    """A covariance that must be positive semi-definite is not."""

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class DivergenceError(NumericalFailure):
    """Training produced a non-finite loss."""

    def __init__(self, step):
        self.step = step
        super().__init__(f"loss became non-finite at step {step}")


class FixedPointError(NumericalFailure):
    """Fixed-point iteration did not converge."""

    def __init__(self, last, iterations):
        self.last = last
        self.iterations = iterations
        super().__init__(f"no convergence after {iterations} iterations (last iterate {last!r})")


class ConfigError(SrnetError, ValueError):
    """Invalid experiment configuration."""


class DataError(SrnetError):
    """Malformed or missing input data."""


class IdxParseError(DataError):
    """An IDX file could not be parsed."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
