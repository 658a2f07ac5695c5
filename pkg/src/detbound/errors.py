"""Exception types shared across the toolkit."""

from __future__ import annotations


class DetboundError(Exception):
    """Base class for all toolkit errors."""


class ParseError(DetboundError):
    """Raised when an input file is not syntactically valid.

    ``offset`` is the character offset of the first bad byte when known.
    """

    def __init__(self, message: str, *, path: str | None = None, offset: int | None = None):
        self.path = path
        self.offset = offset
        prefix = f"{path}: " if path else ""
        suffix = f" (at offset {offset})" if offset is not None else ""
        super().__init__(f"{prefix}{message}{suffix}")


class ValidationError(DetboundError):
    """Raised when a file parses but violates a data invariant.

    ``details`` holds (rule, message) pairs, one per offending record.
    """

    def __init__(self, message: str, details: list[tuple[str, str]] | None = None):
        self.details = details or []
        if self.details:
            listing = "; ".join(msg for _, msg in self.details[:20])
            if len(self.details) > 20:
                listing += f"; ... ({len(self.details) - 20} more)"
            message = f"{message}: {listing}"
        super().__init__(message)


class CodecError(DetboundError):
    """Raised on malformed mask encodings."""


class ConfigurationError(DetboundError):
    """Raised when a requested operation cannot run with the given inputs."""
