"""Exception hierarchy shared across the package."""


class CAGANError(Exception):
    """Base class for all package errors."""


class ConfigError(CAGANError, ValueError):
    pass


class DataError(CAGANError, ValueError):
    pass


class ShapeError(CAGANError, ValueError):
    pass


class MaskFileMissing(CAGANError, FileNotFoundError):
    pass


class MaskShapeError(ShapeError):
    pass


class PadError(CAGANError, ValueError):
    pass


class SplitError(DataError):
    pass


class NumericalError(CAGANError, ArithmeticError):
    pass


class StageError(CAGANError, ValueError):
    pass


class DivergedError(NumericalError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, iteration, name, value):
        super().__init__(f"non-finite {name}={value} at iteration {iteration}")
        self.iteration = iteration
        self.name = name
        self.value = value


class CheckpointError(CAGANError):
    pass


class MatrixError(CAGANError, ValueError):
    pass


class NullSpaceEmpty(CAGANError, ValueError):
    pass
