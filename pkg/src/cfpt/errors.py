"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible with an operation's contract."""


class GeometryError(ValueError):
    """A tensor does not match the pyramid/partition geometry it claims."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(ValueError):
    """An operation was called outside its stated preconditions."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(ValueError):
    """A serialized tensor or checkpoint file is malformed."""
