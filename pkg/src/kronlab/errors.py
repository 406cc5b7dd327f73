"""Exception types raised across the package."""


class KronlabError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(KronlabError, ValueError):
    pass


class NotSymmetric(KronlabError, ValueError):
    pass


class NoConvergence(KronlabError, RuntimeError):
    pass


class ParseError(KronlabError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidIndex(ParseError):
    pass


class IsolatedNode(KronlabError, ValueError):
    pass


class ZeroDenominator(KronlabError, ZeroDivisionError):
    pass


class ZeroState(KronlabError, ValueError):
    pass


class NonPositiveEntry(KronlabError, ValueError):
    pass


class NotUnitNorm(KronlabError, ValueError):
    pass


class BadGap(KronlabError, ValueError):
    pass


class NonFiniteLoss(KronlabError, FloatingPointError):
    """Training diverged. ``history`` keeps the losses recorded so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
