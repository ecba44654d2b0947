"""Exception hierarchy shared across the package."""


class RatchetError(Exception):
    """Base class for all package errors."""


class ModelError(RatchetError):
    """Invalid economic model input."""


class NegativeParameter(ModelError):
    """A model parameter that must be positive is not."""


class SafetyLoadingViolated(ModelError):
    """Premium income does not exceed expected claim outflow."""


class SolverError(RatchetError):
    """Numerical solver failure."""


class DomainExceeded(SolverError):
    """Requested evaluation point lies outside the grid."""


class GridTooShort(SolverError):
    """Grid truncation leaves too much claim-tail mass."""


class SuperpositionIllConditioned(SolverError):
    """Homogeneous basis value too small to solve for the matching constant."""


class ContextIncomplete(SolverError):
    """Segment solve lacks the composite values below its interval."""


class ObstacleInvalid(SolverError):
    """Obstacle curve fails its invariants."""


class VerificationFailed(SolverError):
    """No searched change-set family yields a verified supersolution."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ReferenceMiss(RatchetError):
    """Computed experiment values fall outside reference tolerances."""

    def __init__(self, misses):
        self.misses = list(misses)
        lines = "; ".join(
            f"{m['name']}: got {m['got']:.6g}, want {m['want']:.6g} +/- {m['tol']:.2g}"
            for m in self.misses
        )
        super().__init__(f"reference values missed: {lines}")


class ConfigError(RatchetError):
    """Malformed run configuration."""
