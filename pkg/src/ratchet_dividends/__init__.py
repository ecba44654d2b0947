"""Optimal dividend ratcheting in the Cramer-Lundberg model.

Computes value functions, optimal change regions and free boundaries for the
ratcheting dividend problem via a finite-rate-grid backward recursion,
benchmarks against the unconstrained problem, and cross-validates by Monte
Carlo simulation.
"""

from .errors import (
    ConfigError,
    ContextIncomplete,
    DomainExceeded,
    GridTooShort,
    ModelError,
    NegativeParameter,
    ObstacleInvalid,
    RatchetError,
    ReferenceMiss,
    SafetyLoadingViolated,
    SolverError,
    SuperpositionIllConditioned,
    VerificationFailed,
)
from .model import ClaimDistribution, ModelParams, ValidatedModel, load_model_config, validate_model
from .ide_core import (
    ResidualReport,
    SegmentProblem,
    SegmentSolution,
    ValueCurve,
    XGrid,
    apply_operator,
    convolve,
    hjb_residual,
    solve_segment,
    solve_top_level,
    tail_point,
)

__version__ = "0.1.0"
