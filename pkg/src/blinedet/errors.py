"""Exception hierarchy.

Everything a caller can fix by changing its inputs derives from
:class:`ValidationError` (the CLI maps these to exit code 1).
"""


class BlineError(Exception):
    """Base class for package errors."""


class ValidationError(BlineError, ValueError):
    pass


class InvalidInputError(ValidationError):
    pass


class InvalidCropError(ValidationError):
    pass


class VideoTooShortError(ValidationError):
    pass


class SplitInfeasibleError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class InvalidSpacingError(ValidationError):
    pass


class InvalidAnnotationError(ValidationError):
    pass


class InvalidWeightError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class RegistryError(ValidationError):
    pass


class ContractMismatchError(ValidationError):
    pass


class EmptyAggregationError(ValidationError):
    pass


class AlignmentError(ValidationError):
    pass


class UndefinedMetricError(ValidationError):
    pass


class IntegrityError(BlineError):
    """Checkpoint content does not match its recorded digest."""


class TrainingDivergedError(BlineError):
    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
