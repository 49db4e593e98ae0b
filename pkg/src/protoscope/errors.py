"""Exception hierarchy shared by the protoscope modules."""


class ProtoscopeError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(ProtoscopeError):
    """A binary container has a bad magic number, version, or header."""


class CorruptionError(ProtoscopeError):
    """A binary container is truncated or its payload is inconsistent."""


class ValidationError(ProtoscopeError):
    """Input data violates a documented precondition or invariant."""
