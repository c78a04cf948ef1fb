"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are not conformable."""


class DomainError(ValueError):
    """Input is outside the mathematical domain of an operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class UsageError(RuntimeError):
    """API used in the wrong order or with inconsistent state."""
