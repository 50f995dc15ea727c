"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Unsupported or inconsistent configuration (kernel sizes, widths, bins)."""


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class ContractError(RuntimeError):
    """A call violated an operation's precondition."""


class TapeExhaustedError(RuntimeError):
    """backward() was called twice on the same tape."""


class ParameterError(ValueError):
    """Invalid degradation parameters."""


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


class NumericError(FloatingPointError):
    """A non-finite loss or gradient was produced."""
