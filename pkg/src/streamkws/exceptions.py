"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class FormatError(ValueError):
    """A checkpoint, feature or label file could not be parsed."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values where finite ones are required."""


class SessionError(RuntimeError):
    """A streaming session was used out of order (push after finish, double finish)."""
