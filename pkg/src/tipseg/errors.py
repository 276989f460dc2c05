"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config object or config file violates its invariants."""


class DataValidationError(ValueError):
    """An image/mask pair violates the data-model invariants."""


class MissingInputError(FileNotFoundError):
    """A required input file or directory does not exist."""


class SpecMismatchError(ValueError):
    """A checkpoint's stored model spec does not match the expected one."""


class NumericalError(ArithmeticError):
    """A numerical failure (non-finite loss or gradient) aborted a run."""


class DegenerateInputError(ValueError):
    """Input carries no usable signal (e.g. constant image for thresholding)."""
