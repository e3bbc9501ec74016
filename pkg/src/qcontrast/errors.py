"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class ConfigurationError(ValueError):
    """Raised for invalid configuration values or unsupported setups."""


class DegenerateInputError(ValueError):
    """Raised when an input makes an operation undefined (zero norm, zero std)."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


class IngestionError(ValueError):
    """Raised when a recording file cannot be parsed."""


class ContractViolation(RuntimeError):
    """Raised when a caller breaks an operation's input contract."""


class TrainingDiverged(RuntimeError):
    """Raised when the training objective becomes non-finite."""
