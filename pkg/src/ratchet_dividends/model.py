"""Problem parameters and claim-size distributions.

The surplus process earns premiums at rate ``p`` and loses i.i.d. claims
arriving with Poisson intensity ``beta``; dividends are discounted at rate
``q`` and capped at ``c_bar``.  Distributions are described through their
cumulative distribution function only, since every solver downstream consumes
Stieltjes increments of F rather than densities.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NegativeParameter, SafetyLoadingViolated

__all__ = [
    "ModelParams",
    "ClaimDistribution",
    "ValidatedModel",
    "validate_model",
    "load_model_config",
]


@dataclass(frozen=True)
class ModelParams:
    """Economic constants of the dividend problem.

    premium_rate and dividend_ceiling are currency/time, claim_intensity is
    claims/time and discount_rate is 1/time.
    """

    premium_rate: float
    claim_intensity: float
    discount_rate: float
    dividend_ceiling: float

    def __post_init__(self):
        for name in ("premium_rate", "claim_intensity", "discount_rate", "dividend_ceiling"):
            if not getattr(self, name) > 0.0:
                raise NegativeParameter(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def p(self):
        return self.premium_rate

    @property
    def beta(self):
        return self.claim_intensity

    @property
    def q(self):
        return self.discount_rate

    @property
    def c_bar(self):
        return self.dividend_ceiling

    @property
    def value_ceiling(self):
        """Upper bound c_bar/q on any discounted dividend stream."""
        return self.dividend_ceiling / self.discount_rate


@dataclass(frozen=True)
class ClaimDistribution:
    """Claim-size law given by its cdf.

    Supported kinds:
      * ``exponential`` with parameter ``rate``: F(x) = 1 - exp(-rate*x)
      * ``erlang2``: shape-2, rate-1 Gamma, F(x) = 1 - exp(-x)(1+x)
      * ``tabulated``: (x, F(x)) pairs on a uniform x-grid, linear interpolation

    The cdf must be globally Lipschitz; ``lipschitz_bound`` reports the
    constant (analytic density supremum for parametric kinds, max table slope
    otherwise).
    """

    kind: str
    rate: float = 1.0
    table_x: np.ndarray | None = field(default=None, repr=False)
    table_f: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("exponential", "erlang2", "tabulated"):
            raise ConfigError(f"unknown claim distribution kind {self.kind!r}")
        if self.kind == "exponential" and not self.rate > 0.0:
            raise NegativeParameter(f"exponential rate must be positive, got {self.rate}")
        if self.kind == "tabulated":
            x = np.asarray(self.table_x, dtype=float)
            f = np.asarray(self.table_f, dtype=float)
            if x.ndim != 1 or x.shape != f.shape or x.size < 2:
                raise ConfigError("tabulated cdf needs matching 1-d x and F arrays")
            if not np.all(np.diff(x) > 0):
                raise ConfigError("tabulated cdf x-grid must be strictly increasing")
            if np.any(np.diff(f) < 0) or f[0] < 0 or f[-1] > 1 + 1e-12:
                raise ConfigError("tabulated cdf values must be non-decreasing within [0, 1]")
            if f[0] != 0.0:
                raise ConfigError("tabulated cdf must start at F(0) = 0")
            if 1.0 - f[-1] > 1e-6:
                raise ConfigError("tabulated cdf must reach 1 at the end of the table")
            object.__setattr__(self, "table_x", x)
            object.__setattr__(self, "table_f", f)

    def cdf(self, x):
        """F(x); accepts scalars or arrays, negative arguments return 0."""
        x = np.asarray(x, dtype=float)
        if self.kind == "exponential":
            out = -np.expm1(-self.rate * np.maximum(x, 0.0))
        elif self.kind == "erlang2":
            xe = np.maximum(x, 0.0)
            out = -np.expm1(-xe) - xe * np.exp(-xe)
        else:
            out = np.interp(x, self.table_x, self.table_f, left=0.0, right=1.0)
            out = np.where(x < 0, 0.0, out)
        return float(out) if out.ndim == 0 else out

    def mean(self):
        """E[U]; exact for parametric kinds, trapezoidal ``int (1-F)`` otherwise."""
        if self.kind == "exponential":
            return 1.0 / self.rate
        if self.kind == "erlang2":
            return 2.0
        return float(np.trapz(1.0 - self.table_f, self.table_x))

    def lipschitz_bound(self):
        if self.kind == "exponential":
            return self.rate
        if self.kind == "erlang2":
            # sup of x*exp(-x) is attained at x=1
            return math.exp(-1.0)
        slopes = np.diff(self.table_f) / np.diff(self.table_x)
        return float(slopes.max())

    def sample(self, uniforms):
        """Inverse-cdf claim sizes from uniform draws.

        Erlang2 consumes two uniforms per claim (sum of two unit exponentials),
        the other kinds one.  ``uniforms`` has shape (..., draws_per_claim).
        """
        u = np.asarray(uniforms, dtype=float)
        if self.kind == "exponential":
            return -np.log1p(-u[..., 0]) / self.rate
        if self.kind == "erlang2":
            return -np.log1p(-u[..., 0]) - np.log1p(-u[..., 1])
        # bisection-free inversion: the table is monotone, interp on (F, x)
        f, x = self.table_f, self.table_x
        keep = np.concatenate(([True], np.diff(f) > 0))
        return np.interp(u[..., 0], f[keep], x[keep])

    @property
    def draws_per_claim(self):
        return 2 if self.kind == "erlang2" else 1

    @classmethod
    def exponential(cls, rate):
        return cls(kind="exponential", rate=rate)

    @classmethod
    def erlang2(cls):
        return cls(kind="erlang2")

    @classmethod
    def tabulated(cls, x, f):
        return cls(kind="tabulated", table_x=np.asarray(x, float), table_f=np.asarray(f, float))

    @classmethod
    def from_csv(cls, path):
        """Two-column CSV (x, F) with optional header."""
        xs, fs = [], []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row:
                    continue
                try:
                    xs.append(float(row[0]))
                    fs.append(float(row[1]))
                except ValueError:
                    continue  # header line
        return cls.tabulated(xs, fs)


@dataclass(frozen=True)
class ValidatedModel:
    """Parameter/distribution bundle that passed all well-posedness checks."""

    params: ModelParams
    claims: ClaimDistribution
    loading_ratio: float

    @property
    def p(self):
        return self.params.premium_rate

    @property
    def beta(self):
        return self.params.claim_intensity

    @property
    def q(self):
        return self.params.discount_rate

    @property
    def c_bar(self):
        return self.params.dividend_ceiling

    @property
    def value_ceiling(self):
        return self.params.value_ceiling


def validate_model(params: ModelParams, dist: ClaimDistribution) -> ValidatedModel:
    """Check economic well-posedness, in particular the net-profit condition
    p > beta * E[U], and report the loading ratio p / (beta E[U])."""
    mean = dist.mean()
    if not mean > 0.0:
        raise NegativeParameter(f"claim mean must be positive, got {mean}")
    expected_outflow = params.claim_intensity * mean
    if params.premium_rate <= expected_outflow:
        raise SafetyLoadingViolated(
            f"premium rate {params.premium_rate} does not exceed "
            f"expected claim outflow {expected_outflow}"
        )
    return ValidatedModel(params, dist, params.premium_rate / expected_outflow)


def _claim_distribution_from_config(cfg, base_dir=None):
    if not isinstance(cfg, dict):
        raise ConfigError("claim_distribution must be an object")
    known = {"kind", "rate", "table_path"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown claim_distribution keys: {sorted(unknown)}")
    kind = cfg.get("kind")
    if kind == "exponential":
        return ClaimDistribution.exponential(float(cfg.get("rate", 1.0)))
    if kind == "erlang2":
        return ClaimDistribution.erlang2()
    if kind == "tabulated":
        path = cfg.get("table_path")
        if path is None:
            raise ConfigError("tabulated claim_distribution requires table_path")
        if base_dir is not None:
            import os

            path = os.path.join(base_dir, path) if not os.path.isabs(path) else path
        return ClaimDistribution.from_csv(path)
    raise ConfigError(f"unknown claim_distribution kind {kind!r}")


def load_model_config(source, base_dir=None):
    """Build a ValidatedModel from a JSON document (path or parsed dict).

    Expected keys: premium_rate, claim_intensity, discount_rate,
    dividend_ceiling, claim_distribution {kind, rate | table_path}.
    Unknown keys are rejected.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "read"):
        if hasattr(source, "read"):
            doc = json.load(source)
        else:
            with open(source) as fh:
                doc = json.load(fh)
    else:
        doc = source
    if not isinstance(doc, dict):
        raise ConfigError("model config must be a JSON object")
    known = {
        "premium_rate",
        "claim_intensity",
        "discount_rate",
        "dividend_ceiling",
        "claim_distribution",
    }
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    missing = known - set(doc)
    if missing:
        raise ConfigError(f"missing model config keys: {sorted(missing)}")
    try:
        params = ModelParams(
            premium_rate=float(doc["premium_rate"]),
            claim_intensity=float(doc["claim_intensity"]),
            discount_rate=float(doc["discount_rate"]),
            dividend_ceiling=float(doc["dividend_ceiling"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model parameters must be numbers: {exc}") from exc
    dist = _claim_distribution_from_config(doc["claim_distribution"], base_dir)
    return validate_model(params, dist)
