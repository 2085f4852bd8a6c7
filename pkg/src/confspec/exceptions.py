"""Exception hierarchy shared by all confspec modules."""


class ConfspecError(Exception):
    """Base class for package errors."""


class DegenerateMeshError(ConfspecError, ValueError):
    """Mesh parameters would produce an invalid or degenerate triangulation."""


class EmptyBallError(ConfspecError, ValueError):
    """A geodesic ball contains no vertex besides its center."""


class DegenerateDensityError(ConfspecError, ValueError):
    """A density integral that must be positive vanished."""


class SolverFailure(ConfspecError, RuntimeError):
    """An iterative solver did not reach its tolerance.

    Parameters
    ----------
    message : str
    residuals : array_like, optional
        Residual norms of the unconverged pairs at exit.
    """

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class ConfigError(ConfspecError, ValueError):
    """Invalid run configuration. ``keys`` lists the offending entries."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)
