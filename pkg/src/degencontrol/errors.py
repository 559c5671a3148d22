"""Exception types shared across the package.

Validation problems (bad inputs, inconsistent configurations) raise
``ValueError`` subclasses.  Failures of a numerical procedure on valid input
raise ``NumericalError`` subclasses.  The CLI maps the two families to
different exit codes.
"""


class ValidationError(ValueError):
    """Invalid configuration or argument."""


class NumericalError(RuntimeError):
    """A numerical procedure failed on otherwise valid input."""


class ConvergenceError(NumericalError):
    """An iterative solver did not reach its tolerance.

    ``history`` holds the residual trace when available.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class ConstructionError(NumericalError):
    """A constructed auxiliary function failed its own post-conditions."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
