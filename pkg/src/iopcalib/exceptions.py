"""Exception types shared across the package.

Everything derives from :class:`CalibrationError` so callers can catch the
package's failures with a single except clause. Validation failures also
derive from :class:`ValueError` to stay friendly to generic numpy/sklearn
error handling.
"""


class CalibrationError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(CalibrationError, ValueError):
    """Raised when data passed to a function fails validation."""


class InvalidParameterError(CalibrationError, ValueError):
    """Raised when model parameters are malformed or out of range."""


class InvalidConfigError(CalibrationError, ValueError):
    """Raised when a configuration object fails validation."""


class ContractViolationError(CalibrationError):
    """Raised when a checked mathematical precondition does not hold."""


class TrainingDivergedError(CalibrationError, RuntimeError):
    """Raised when the training objective becomes non-finite.

    Attributes
    ----------
    iteration : int
        Zero-based optimizer iteration at which divergence was detected.
    """

    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


class DataFormatError(CalibrationError, ValueError):
    """Raised when a dataset file cannot be parsed.

    Attributes
    ----------
    line : int or None
        One-based line number of the offending record for text formats.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
