"""Exception hierarchy shared by every module."""


class SubsetLiftError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SubsetLiftError, ValueError):
    pass


class InvalidShapeError(InvalidInputError):
    pass


class InvalidBatchError(InvalidInputError):
    pass


class InvalidSubsetError(InvalidInputError):
    pass


class DomainError(InvalidInputError):
    pass


class NumericFailureError(SubsetLiftError, ArithmeticError):
    pass


class DegenerateScaleError(NumericFailureError):
    pass


class ProjectionError(NumericFailureError):
    pass


class ParseError(SubsetLiftError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(ParseError):
    pass


class UnsupportedAugmentationError(InvalidInputError):
    pass


class SizeError(InvalidInputError):
    pass


class TrainingHalted(NumericFailureError):
    """Raised when training meets a non-finite loss or gradient.

    ``last_good_checkpoint`` points at the most recent checkpoint written
    before the failure (``None`` if none was written yet) and ``step`` is
    the step at which training stopped.
    """

    def __init__(self, message, step, last_good_checkpoint=None):
        super().__init__(message)
        self.step = step
        self.last_good_checkpoint = last_good_checkpoint
