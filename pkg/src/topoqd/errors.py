"""Exception types raised across the package."""


class TopoError(Exception):
    """Base class for all package errors."""


class ParseError(TopoError):
    """Grid or config file is malformed or misses a required field."""


class ValidationError(TopoError):
    """A model invariant is violated. The message names the offending element."""


class IslandedContingency(ValidationError):
    """A listed contingency disconnects the base-case graph."""


class SingularSystem(TopoError):
    """The DC susceptance system cannot be inverted (disconnected grid)."""


class IslandedTopology(TopoError):
    """A genome disconnects the grid."""


class ConfigError(TopoError):
    """Invalid optimizer or pipeline configuration."""


class StageError(TopoError):
    """Wraps an error raised inside a pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
