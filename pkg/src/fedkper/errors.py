"""Exception hierarchy shared by every module."""


class FedKPerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FedKPerError, ValueError):
    """Array shapes or parameter manifests do not line up."""


class ValidationError(FedKPerError, ValueError):
    """An argument violates a documented precondition."""


class NumericError(FedKPerError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(FedKPerError, ValueError):
    """An experiment configuration or partition request is invalid."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class FormatError(FedKPerError, ValueError):
    """A dataset or trajectory file could not be parsed."""

    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        where = ""
        if offset is not None:
            where = f" (at byte offset {offset})"
        elif line is not None:
            where = f" (at line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


class UndefinedPeakError(ValidationError):
    """Relative forgetting is undefined for a zero-valued peak."""
