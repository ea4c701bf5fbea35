"""Exception types shared across the package."""


class AllocatorError(Exception):
    """Base class for domain errors."""


class InvalidParameters(AllocatorError, ValueError):
    """Model or utility parameters violate an invariant."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class LengthMismatch(AllocatorError, ValueError):
    pass


class WealthBelowFloor(AllocatorError, ValueError):
    """Wealth does not exceed the present value of the subsistence floor."""


class NumericalFailure(AllocatorError, RuntimeError):
    """A root search or fixed-point iteration did not converge."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)
