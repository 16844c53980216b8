class DeepenError(Exception):
    """Base class for package errors."""


class DimensionError(DeepenError, ValueError):
    """Array shapes are incompatible or unsupported."""


class DivergenceError(DeepenError, ArithmeticError):
    """An iterative method produced non-finite or runaway iterates."""

    def __init__(self, message: str, iteration: int | None = None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = list(trace) if trace is not None else []


class InfeasibleError(DeepenError, ValueError):
    """Requested configuration cannot be realized."""


class FormatError(DeepenError, ValueError):
    """Malformed binary file."""
