"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes that do not fit together."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""
