"""Exception and warning types shared across the package."""


class WeakflowError(Exception):
    """Base class for all package errors."""


class DegenerateSupportError(WeakflowError):
    """An averaging window (ball or shell) is empty at some point."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class UnsupportedOracleError(WeakflowError):
    """A closed-form quantity was requested from a backend that has none."""


class UnsupportedBackendError(WeakflowError):
    """The operation is not defined for this space backend."""


class UnstableFitError(WeakflowError):
    """Least-squares extrapolation is too ill-conditioned to trust."""


class InfeasibleMarginalsError(WeakflowError):
    """Two measures handed to a transport solver carry different mass."""


class ConvergenceError(WeakflowError):
    """An iterative solver ran out of iterations."""


class DegenerateSupportWarning(UserWarning):
    """A ball held only its center point; the operator acted as identity there."""


class VirtuallyPscWarning(UserWarning):
    """Conjugate propagation requested on a space not flagged virtually psc."""


class RenormalizationWarning(UserWarning):
    """Tiny negative densities were clipped during diffusion propagation."""
