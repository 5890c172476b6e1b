"""Exception hierarchy shared across the package."""


class ShopscapeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ShopscapeError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(InvalidInputError):
    """Input is syntactically valid but statistically unusable
    (e.g. a constant field, which has no spatial variance)."""


class ParseError(InvalidInputError):
    """A data file could not be parsed.

    Carries the offending path and, when known, the 1-based line number.
    """

    def __init__(self, message, path=None, line=None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if line is not None:
            detail = f"{detail} (line {line})"
        super().__init__(detail)
        self.path = path
        self.line = line


class PipelineStageError(ShopscapeError, RuntimeError):
    """A pipeline stage failed; partial outputs have been removed."""

    def __init__(self, stage, cause):
        super().__init__(f"pipeline stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
