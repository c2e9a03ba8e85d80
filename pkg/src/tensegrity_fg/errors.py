"""Exception types shared across the package."""


class TensegrityError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(TensegrityError, ValueError):
    pass


class OutOfDomainError(TensegrityError, ValueError):
    pass


class FitError(TensegrityError):
    pass


class RankDeficiencyError(FitError):
    """Raised when the data cannot determine every parameter of a fit."""

    def __init__(self, message, *, starved=None):
        super().__init__(message)
        self.starved = starved


class LinearizationError(TensegrityError):
    pass


class GraphEmptyError(TensegrityError):
    pass


class SequenceError(TensegrityError):
    pass


class InitializationError(TensegrityError):
    pass


class DegenerateAxisError(TensegrityError):
    def __init__(self, message, *, time=None):
        super().__init__(message)
        self.time = time


class FrameRejectedError(TensegrityError):
    pass


class GenerationError(TensegrityError):
    pass


class ParseError(TensegrityError):
    def __init__(self, message, *, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class AlignmentError(TensegrityError):
    pass
