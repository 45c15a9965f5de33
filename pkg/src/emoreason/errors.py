"""Exception types shared across the package."""

from __future__ import annotations


class EmoReasonError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EmoReasonError, ValueError):
    """Invalid configuration, taxonomy, weights or call arguments."""


class InvalidTaxonomyError(ConfigurationError):
    pass


class InvalidTraceError(EmoReasonError, ValueError):
    """A StructuredTrace that cannot be rendered canonically."""


class InvalidGroupError(EmoReasonError, ValueError):
    pass


class InvalidRatioError(EmoReasonError, ValueError):
    pass


class NumericError(EmoReasonError, ArithmeticError):
    pass


class JudgeError(EmoReasonError, RuntimeError):
    """The judge could not produce a usable verdict (after retries)."""


class ManifestError(EmoReasonError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CheckpointError(EmoReasonError, ValueError):
    pass
