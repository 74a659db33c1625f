"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an operation's mathematical domain."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced while debug checks are on."""


class ConfigError(ValueError):
    """A configuration object violates its invariants."""
