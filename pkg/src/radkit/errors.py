"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class RadkitError(Exception):
    """Base class for every error raised by this package."""


class EmptyLabel(RadkitError, ValueError):
    pass


class ParseFailure(RadkitError, ValueError):
    """Text could not be parsed; ``text`` holds the offending input."""

    def __init__(self, message: str, text: str = "") -> None:
        super().__init__(message)
        self.text = text


class DocumentSyntaxError(RadkitError, ValueError):
    """A JSON document is not syntactically valid."""


class SchemaError(RadkitError, ValueError):
    """A document is well-formed but violates its schema at ``path``."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class EmptyInput(RadkitError, ValueError):
    pass


class LengthMismatch(RadkitError, ValueError):
    pass


class MissingField(RadkitError, KeyError):
    def __init__(self, name: str) -> None:
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"missing field {self.name!r}"


class UnknownSplit(RadkitError, KeyError):
    def __init__(self, source_id: str) -> None:
        super().__init__(source_id)
        self.source_id = source_id

    def __str__(self) -> str:
        return f"id {self.source_id!r} is not in the split manifest"


class DuplicateId(RadkitError, ValueError):
    pass


class UnknownStratum(RadkitError, KeyError):
    pass


class AdapterUnavailable(RadkitError, ConnectionError):
    pass


class AdapterProtocolError(RadkitError, RuntimeError):
    pass


class ConfigError(RadkitError, ValueError):
    pass


class TooManyFailures(RadkitError, RuntimeError):
    def __init__(self, failed: int, total: int) -> None:
        super().__init__(f"{failed} of {total} requests failed")
        self.failed = failed
        self.total = total
