"""Exception hierarchy shared by all modules."""


class NehariError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(NehariError):
    pass


class ResolutionError(NehariError):
    pass


class CutoffOverlapError(NehariError):
    pass


class EstimationError(NehariError):
    """An iterative constant estimate did not converge.

    The last iterate and quotient are kept so callers can inspect them.
    """

    def __init__(self, msg, last_iterate=None, last_value=None):
        super().__init__(msg)
        self.last_iterate = last_iterate
        self.last_value = last_value


class PreconditionError(NehariError, ValueError):
    pass


class RetractionError(NehariError):
    def __init__(self, msg, last_iterate=None):
        super().__init__(msg)
        self.last_iterate = last_iterate


class DegenerateGeneratorError(NehariError):
    pass


class ConfigError(NehariError):
    pass


class SolveError(NehariError):
    """A constrained minimisation did not reach ``Converged``."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report
