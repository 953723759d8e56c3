"""Exception hierarchy shared by every mdan module."""


class MdanError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MdanError, ValueError):
    """Operand extents are incompatible with an operation."""


class ContractError(MdanError, ValueError):
    """A call violated an operation's precondition."""


class ConfigError(MdanError, ValueError):
    """An architecture or training configuration is invalid."""


class HierarchyParseError(MdanError, ValueError):
    """A hierarchy file could not be parsed.

    ``line`` is the 1-based line number of the offending line, or ``None``
    when the problem is not tied to a single line.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(MdanError, ValueError):
    """A data file (image, index, checkpoint) is malformed or inconsistent."""


class NumericError(MdanError, ArithmeticError):
    """A computation produced a non-finite value."""
