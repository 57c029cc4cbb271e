"""Exception hierarchy shared by every module."""

from __future__ import annotations


class CacheSAEError(Exception):
    """Base class for all package errors."""


class ShapeError(CacheSAEError, ValueError):
    pass


class NumericError(CacheSAEError, ArithmeticError):
    pass


class TokenError(CacheSAEError, ValueError):
    pass


class TrainingError(NumericError):
    """Loss went non-finite; ``step`` records where."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class ConfigError(CacheSAEError, ValueError):
    pass


class StateError(CacheSAEError, RuntimeError):
    pass


class DegenerateError(CacheSAEError, ValueError):
    pass


class FormatError(CacheSAEError, ValueError):
    pass


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass
