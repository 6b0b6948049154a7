"""Exception types raised across the package."""


class BparhmmError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BparhmmError, ValueError):
    """Input data violates a documented precondition."""


class InvalidStateError(BparhmmError, ValueError):
    """A sampler state (or piece of one) violates a structural invariant."""


class NumericFailure(BparhmmError, ArithmeticError):
    """A factorization or density evaluation failed numerically."""

    def __init__(self, message, behavior=None):
        super().__init__(message)
        self.behavior = behavior


class ConfigError(BparhmmError, ValueError):
    """A configuration file or option is malformed."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
