"""Exception types shared across the engine.

Parsing problems carry a source position; runtime problems carry a short
machine-readable ``kind`` so rules can be routed to error queues without
string matching.
"""

from __future__ import annotations


class DeclmqError(Exception):
    """Base class for every error raised by this package."""


class XmlParseError(DeclmqError):
    """Malformed XML document text."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{line}:{column}: {message}" if line else message)
        self.line = line
        self.column = column


class ParseError(DeclmqError):
    """Syntax error in application or expression text."""

    def __init__(self, message: str, line: int, column: int, token: str = ""):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column
        self.token = token


class UnknownKeyword(ParseError):
    """A clause keyword, queue kind, mode, or type name is not recognized."""


class StaticError(DeclmqError):
    """An expression uses a construct outside the supported subset."""


class DynamicError(DeclmqError):
    """Runtime evaluation failure inside an expression.

    ``kind`` is a stable identifier such as ``type-error``, ``unknown-function``,
    ``slice-context``, ``undefined-property``, ``unbound-variable``,
    ``unknown-queue`` or ``enqueue-body``.
    """

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class StoreError(DeclmqError):
    """Base class for message store failures."""


class UnknownQueue(StoreError):
    pass


class UnknownSlicing(StoreError):
    pass


class UnknownProperty(StoreError):
    pass


class AlreadyProcessed(StoreError):
    pass


class ConflictAbort(StoreError):
    """Transaction footprint collided with a concurrently committed one."""


class FixedPropertyOverride(StoreError):
    """Explicit value supplied for a fixed or system-set property."""


class PropertyValueError(StoreError):
    """A property value does not conform to the declared value type."""


class IncompatibleApplication(StoreError):
    """Deployed application conflicts with what the store already holds."""


class CorruptLog(StoreError):
    """The log or snapshot file is unreadable beyond normal tail truncation."""


class StoreLocked(StoreError):
    """Another live process holds the store directory lock."""


class CompileError(DeclmqError):
    """Application failed validation at rule compilation time."""

    def __init__(self, diagnostics):
        lines = "; ".join(str(d) for d in diagnostics)
        super().__init__(f"application is not valid: {lines}")
        self.diagnostics = list(diagnostics)


class UnresolvableErrorQueue(DeclmqError):
    """No error queue could be resolved for a failing rule or delivery."""


class FatalError(DeclmqError):
    """Unrecoverable engine condition; the run loop must stop."""
