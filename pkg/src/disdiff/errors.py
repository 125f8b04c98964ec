"""Exception types raised across the toolkit."""


class DisDiffError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(DisDiffError, ValueError):
    pass


class ConfigurationError(DisDiffError, ValueError):
    pass


class DegenerateInputError(InvalidInputError):
    """Input is well-formed but carries no usable signal (e.g. all-zero maps)."""


class UnsupportedError(DisDiffError, NotImplementedError):
    pass


class TrainingDivergenceError(DisDiffError, RuntimeError):
    pass


class RunAborted(DisDiffError, RuntimeError):
    """A protection run failed part way; ``partial`` holds whatever was logged."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
