"""Exception types shared across the package."""


class TcnSearchError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TcnSearchError, ValueError):
    """A value or data structure violates one of its invariants."""


class ParseError(TcnSearchError, ValueError):
    """Malformed input text. Carries a line and optional column for context."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + loc)
        self.line = line
        self.column = column


class ConfigurationError(TcnSearchError, ValueError):
    """A run configuration is unusable (infeasible cohort, bad sizes, ...)."""
