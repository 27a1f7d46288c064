"""Exception hierarchy shared by every specloop module."""


class SpecLoopError(Exception):
    """Base class for all specloop errors."""


class UsageError(SpecLoopError, ValueError):
    """An argument is outside the documented domain of an operation."""


class StructureError(SpecLoopError, ValueError):
    """A draft tree or trace is malformed."""


class SchemaError(SpecLoopError, ValueError):
    """A serialized record or snapshot has an unknown or inconsistent schema."""


class IntegrityError(SpecLoopError, RuntimeError):
    """An internal consistency check failed (version ordering, counters, non-finite params)."""
