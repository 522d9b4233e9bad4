"""Exception hierarchy shared by every module of the package."""


class DepsError(Exception):
    """Base class for all package errors."""

    kind = "error"


class ShapeError(DepsError, ValueError):
    kind = "shape"

    def __init__(self, operand, expected, got):
        self.operand = operand
        self.expected = tuple(expected) if expected is not None else None
        self.got = tuple(got)
        super().__init__(f"operand {operand!r}: expected extents {self.expected}, got {self.got}")


class NumericError(DepsError, ArithmeticError):
    """A non-finite value showed up where only finite values are allowed."""

    kind = "numeric"


class ContractError(DepsError, ValueError):
    kind = "contract"


class InternalError(DepsError, RuntimeError):
    kind = "internal"


class ValidationError(DepsError, ValueError):
    kind = "validation"

    def __init__(self, dimension, message):
        self.dimension = dimension
        super().__init__(f"{dimension}: {message}")


class CalibrationRequiredError(DepsError, LookupError):
    kind = "calibration"


class FormatError(DepsError, ValueError):
    kind = "format"

    def __init__(self, message, offset=None):
        self.offset = offset
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")
