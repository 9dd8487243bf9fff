"""Exception types raised across the package."""


class GraphSplatError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(GraphSplatError, ValueError):
    pass


class InconsistentStateError(GraphSplatError):
    """Two objects that must agree (e.g. a graph and its cloud) do not."""


class InsufficientViewsError(GraphSplatError):
    pass


class EmptyObjectError(GraphSplatError):
    """No voxel survives the density threshold."""


class NonFiniteLossError(GraphSplatError):
    def __init__(self, message, iteration=None, dump=None):
        super().__init__(message)
        self.iteration = iteration
        self.dump = dump or {}


class ParseError(GraphSplatError):
    """Malformed or truncated file. Carries the byte offset and field name."""

    def __init__(self, message, offset=None, field=None):
        detail = message
        if field is not None:
            detail += f" (field {field!r}"
            if offset is not None:
                detail += f", byte offset {offset}"
            detail += ")"
        super().__init__(detail)
        self.offset = offset
        self.field = field


class ConfigError(InvalidParameterError):
    """Unknown key or invalid value in a run configuration."""
