"""Exception hierarchy shared across the package."""


class LoadTuneError(Exception):
    """Base class for all package errors."""


class ConfigError(LoadTuneError, ValueError):
    """Invalid configuration or precondition violated by arguments."""


class DimensionError(LoadTuneError, ValueError):
    """Array shapes do not line up."""


class NumericError(LoadTuneError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class UsageError(LoadTuneError, RuntimeError):
    """An API was called out of order or with unusable input."""


class IngestError(LoadTuneError, ValueError):
    """A CSV file could not be parsed against the load schema."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DataQualityError(LoadTuneError, ValueError):
    """Too much data is missing for a column to be usable."""


class EmptyDatasetError(LoadTuneError, ValueError):
    """Windowing produced no usable samples."""


class ForecastRangeError(LoadTuneError, IndexError):
    """Requested forecast start lies outside the available windows."""


class OptimizationError(LoadTuneError, RuntimeError):
    """A metaheuristic could not produce any finite evaluation."""
