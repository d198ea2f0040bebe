"""Exception types shared across the package."""


class BiomevalError(Exception):
    """Base class for errors raised by this package."""


class ParseError(BiomevalError):
    """A line or document could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(BiomevalError):
    """Parsed data violates a declared invariant."""


class FormatError(BiomevalError):
    """A binary or structured file does not match its declared format."""


class ProtocolError(BiomevalError):
    """A gallery/probe protocol is unusable for the requested metric."""
