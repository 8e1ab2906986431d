"""Exception types shared across the package."""


class CbnaError(Exception):
    """Base class for all package errors."""


class ShapeError(CbnaError, ValueError):
    pass


class FormatError(CbnaError, ValueError):
    pass


class DataError(CbnaError, ValueError):
    pass


class MetricError(CbnaError, ValueError):
    pass


class TrainingError(CbnaError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
