"""Exception and warning types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when inputs violate a documented precondition."""


class DomainError(ValueError):
    """Raised when an evaluation point lies outside the valid domain."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces a non-finite or degenerate result."""


class ZeroIntensityWarning(RuntimeWarning):
    """An event landed where the intensity evaluates to zero (log-likelihood is -inf)."""


class IdentifiabilityWarning(UserWarning):
    """The data carry little or no information about some parameters."""
