"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or unsupported shapes."""


class ParameterError(ValueError):
    """A numeric parameter is outside its valid range."""


class ValidationError(ValueError):
    """An input violates a documented precondition (bad normalization, NaN, ...)."""


class DegenerateRowError(ValidationError):
    """A row that must carry probability mass is entirely zero."""


class EnumerationBoundsError(ValueError):
    """An instance is too large for exact enumeration; refuse instead of running."""


class AlignmentError(ValueError):
    """Two records that must share token sets or layer counts do not."""


class CorpusError(ValueError):
    """A corpus file is empty or cannot be ingested."""


class ConfigError(ValueError):
    """A run configuration file is missing, unparsable, or inconsistent."""


class TrainingFailure(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch
