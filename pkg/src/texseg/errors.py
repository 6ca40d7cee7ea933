"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with the operation's contract."""


class ParameterError(ValueError):
    """An operation parameter is outside its valid range."""


class FormatError(ValueError):
    """A file violates its on-disk format; the message names the bad field."""


class ConfigError(ValueError):
    """A configuration is invalid or does not match an expected one."""


class DataError(ValueError):
    """Dataset content violates an invariant (labels, masks, manifests)."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where the contract requires finite ones."""
