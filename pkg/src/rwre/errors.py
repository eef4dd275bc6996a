"""Exception types shared across the package."""


class RwreError(Exception):
    """Base class for all package-specific errors."""


class ParameterDomainError(RwreError, ValueError):
    """A distribution or operator parameter is outside its admissible domain."""


class DimensionError(RwreError, ValueError):
    """An operation restricted to a specific lattice dimension got another one."""


class ShapeError(RwreError, ValueError):
    """Array shapes do not match the lattice geometry."""


class SupportError(RwreError, ValueError):
    """An initial measure is supported outside the open box (-1, 1)^d."""


class NumericalFailureError(RwreError, RuntimeError):
    """An iterative solver or quadrature did not reach its target accuracy.

    Carries the achieved residual so callers can report diagnostics.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class FitQualityError(RwreError, RuntimeError):
    """A least-squares fit is ill-conditioned or statistically unusable."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegeneracyError(RwreError, RuntimeError):
    """Discrete eigenvalues are too close to pair unambiguously with a target."""


class DivergenceError(RwreError, ValueError):
    """A series bound is evaluated outside its region of convergence."""


class DenseCapError(RwreError, ValueError):
    """A dense-matrix diagnostic was requested above the supported size cap."""


class EmptySampleError(RwreError, RuntimeError):
    """All walkers were absorbed before the requested observation time."""
