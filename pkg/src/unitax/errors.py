"""Exception types shared across the package.

Every error carries a short ``kind`` used by the command-line front end to
print ``ERROR <kind>: <detail>`` lines.
"""


class UnitaxError(Exception):
    kind = "Error"


class ParseError(UnitaxError, ValueError):
    kind = "ParseError"

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class DanglingReferenceError(UnitaxError, LookupError):
    kind = "ReferenceError"


class DuplicateError(UnitaxError, ValueError):
    kind = "DuplicateError"


class InconsistencyError(UnitaxError, ValueError):
    kind = "InconsistencyError"


class CycleError(InconsistencyError):
    kind = "CycleError"


class ShapeError(UnitaxError, ValueError):
    kind = "ShapeError"


class EmptyLabelSetError(UnitaxError, ValueError):
    kind = "EmptyLabelSet"


class DegenerateError(UnitaxError, ValueError):
    kind = "DegenerateError"


class EmptyPoolError(UnitaxError, ValueError):
    kind = "EmptyPool"


class OutOfRangeError(UnitaxError, IndexError):
    kind = "OutOfRange"


class FormatError(UnitaxError, ValueError):
    kind = "FormatError"
