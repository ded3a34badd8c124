"""Exception hierarchy shared by every lorakit module."""


class LorakitError(Exception):
    """Base class for all errors raised by lorakit."""


class ShapeError(LorakitError, ValueError):
    pass


class DomainError(LorakitError, ValueError):
    """Input lies outside the domain of the requested quantity."""


class ConditioningError(LorakitError, ArithmeticError):
    """A matrix that must be invertible / positive definite is not (numerically)."""


class RankError(LorakitError, ValueError):
    pass


class FeasibilityError(LorakitError, ValueError):
    """Iterate left the constraint set by more than the allowed slack."""


class EmptyAdapterError(LorakitError, ValueError):
    pass


class ConfigurationError(LorakitError, ValueError):
    """Bad or inconsistent configuration. ``key`` holds the dotted key path when known."""

    def __init__(self, message, key=None):
        self.key = key
        if key:
            message = f"{key}: {message}"
        super().__init__(message)
