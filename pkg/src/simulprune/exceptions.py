"""Exception hierarchy shared by every module."""


class SimulpruneError(Exception):
    """Base class for all package errors."""


class ShapeError(SimulpruneError, ValueError):
    """Operand extents are incompatible."""


class ContractError(SimulpruneError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(SimulpruneError, FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class SpecError(SimulpruneError, ValueError):
    """A network description is invalid (shape inference or host rules)."""


class DegenerateStateError(SimulpruneError, ValueError):
    """Statistics or ratios are undefined for the given state."""


class FormatError(SimulpruneError, ValueError):
    """A file does not follow its binary format.

    Parameters
    ----------
    message : str
        Human readable description.
    path : str, optional
        File that failed to parse.
    offset : int, optional
        Byte offset at which parsing failed.
    """

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class CompactionError(SimulpruneError):
    """A prunable layer would be left without any surviving filter."""

    def __init__(self, layer_name, message=None):
        self.layer_name = layer_name
        super().__init__(message or f"layer {layer_name!r} has no surviving filters")
