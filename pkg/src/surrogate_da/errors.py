"""Exception hierarchy shared across the package."""


class SurrogateDAError(Exception):
    """Base class for all package errors."""


class DimensionError(SurrogateDAError, ValueError):
    """Shapes, geometries or feature counts do not line up."""


class ParameterError(SurrogateDAError, ValueError):
    """An argument is outside its admissible range."""


class DivergenceError(SurrogateDAError, ArithmeticError):
    """A state became non-finite or left its reference range."""

    def __init__(self, message, time_index=None, step_index=None):
        super().__init__(message)
        self.time_index = time_index
        self.step_index = step_index


class SequencingError(SurrogateDAError):
    """Observations arrived out of order or the stream ended early."""


class SingularGainError(SurrogateDAError, ArithmeticError):
    """The innovation matrix has a nonpositive diagonal entry."""


class CapacityError(SurrogateDAError):
    """A dense assembly was requested for a problem that is too large."""


class UndefinedMetricError(SurrogateDAError, ArithmeticError):
    """A metric is undefined for the given inputs (e.g. zero-norm truth)."""
