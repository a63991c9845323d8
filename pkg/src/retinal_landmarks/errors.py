class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class FitError(RuntimeError):
    """Raised when a curve fit is unidentifiable from the given points."""
