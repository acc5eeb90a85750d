"""Exception hierarchy shared by every stage.

The CLI maps these onto exit codes, so the split between data problems,
provider outages and configuration mistakes matters.
"""

from __future__ import annotations


class MifcError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(MifcError, ValueError):
    """A value violates a record or config invariant."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class FormatError(MifcError, ValueError):
    """Input bytes could not be decoded into a record (bad JSON, bad UTF-8)."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class ParseError(MifcError, ValueError):
    """An LLM response does not follow the requested output grammar.

    ``marker`` names the missing or offending marker when one applies,
    ``position`` is a character offset into the response when known.
    """

    def __init__(self, message: str, marker: str | None = None, position: int | None = None):
        self.marker = marker
        self.position = position
        super().__init__(message)


class RenderError(MifcError, KeyError):
    """A prompt template was rendered without one of its placeholders bound."""

    def __init__(self, placeholder: str):
        self.placeholder = placeholder
        super().__init__(placeholder)

    def __str__(self) -> str:
        return f"missing binding for placeholder {{{self.placeholder}}}"


class TransportError(MifcError):
    """A provider call failed for good (retries exhausted or non-retryable)."""

    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        self.status = status
        self.attempts = attempts
        super().__init__(message)


class ConfigError(MifcError):
    """The run configuration is missing, malformed or inconsistent."""
