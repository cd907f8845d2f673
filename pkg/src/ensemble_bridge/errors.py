"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class ControllabilityError(RuntimeError):
    """Raised when a required averaged Gramian is numerically singular.

    The ``report`` attribute carries the :class:`ControllabilityReport` (or
    ``None``) and ``time`` names the grid time at which the failure occurred,
    when known.
    """

    def __init__(self, message, report=None, time=None):
        super().__init__(message)
        self.report = report
        self.time = time


class DivergenceError(FloatingPointError):
    """Raised when a simulated state becomes non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
