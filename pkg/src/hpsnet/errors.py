"""Exception hierarchy shared by every hpsnet module."""


class HpsError(Exception):
    """Base class for all errors raised by hpsnet."""


class ShapeError(HpsError, ValueError):
    """Operands have incompatible shapes."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        parts = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {parts}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(HpsError, ValueError):
    """A documented precondition was violated."""


class DataError(HpsError, ValueError):
    """Label or raster content is out of range."""


class ConfigError(HpsError, ValueError):
    """Configuration is inconsistent or unknown."""


class TrainingError(HpsError, RuntimeError):
    """Optimization produced non-finite values."""


class IoError(HpsError, OSError):
    """Malformed or truncated file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)
