"""Integro-differential operator and interval solvers.

Everything here revolves around the operator

    L_c(v)(x) = c + (p - c) v'(x) - (q + beta) v(x) + beta * int_0^x v(x-a) dF(a)

evaluated on a uniform surplus grid.  The convolution is a Stieltjes integral
computed by midpoint-increment quadrature, so only cdf increments of the claim
law are ever needed.  Solving L_c(v) = 0 on an interval is a first-order
linear Volterra integro-differential problem; its solution set is a
one-parameter affine family, which the marcher below integrates left-to-right
as a (particular, homogeneous) basis pair.  For c < p the homogeneous member
grows exponentially, so the pair is periodically re-anchored (the particular
member gets a multiple of the homogeneous one subtracted, the homogeneous one
is rescaled); the affine family is invariant under these transforms while all
stored magnitudes stay bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContextIncomplete,
    DomainExceeded,
    GridTooShort,
    SuperpositionIllConditioned,
)
from .model import ValidatedModel

__all__ = [
    "XGrid",
    "ValueCurve",
    "SegmentProblem",
    "SegmentSolution",
    "Quadrature",
    "convolve",
    "apply_operator",
    "operator_residuals",
    "solve_top_level",
    "solve_segment",
    "hjb_residual",
    "ResidualReport",
    "tail_point",
    "default_residual_tol",
]

# Tail mass allowed beyond the grid end in solve_top_level.
TAIL_MASS_TOL = 1e-8
# Re-anchor the (particular, homogeneous) basis pair once either member
# exceeds this magnitude; keeps cancellation error ~ eps * cap.
RENORM_CAP = 1e7


@dataclass(frozen=True)
class XGrid:
    """Uniform surplus grid with nodes x_i = i*h, i = 0..n."""

    x_max: float
    h: float
    n: int

    def __post_init__(self):
        if self.h <= 0 or self.n < 2:
            raise ValueError("grid needs h > 0 and at least 3 nodes")
        if abs(self.n * self.h - self.x_max) > 1e-9 * max(1.0, self.x_max):
            raise ValueError("x_max must equal n*h")

    @classmethod
    def make(cls, x_max, h):
        """Grid over [0, x_max] with step ~h, rounded so x_max is a node."""
        n = max(2, int(round(x_max / h)))
        return cls(x_max=x_max, h=x_max / n, n=n)

    @property
    def nodes(self):
        return np.arange(self.n + 1) * self.h

    def index_of(self, x):
        """Nearest node index for x; raises if x is not close to a node."""
        j = int(round(x / self.h))
        if j < 0 or j > self.n:
            raise DomainExceeded(f"x={x} outside grid [0, {self.x_max}]")
        if abs(j * self.h - x) > 1e-6 * self.h + 1e-12:
            raise DomainExceeded(f"x={x} is not a grid node (h={self.h})")
        return j


@dataclass(frozen=True)
class ValueCurve:
    """A sampled function of surplus on a uniform grid."""

    grid: XGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n + 1,):
            raise ValueError("values length must equal node count")
        if not np.all(np.isfinite(v)):
            raise ValueError("curve values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def x(self):
        return self.grid.nodes

    def __call__(self, x):
        return float(np.interp(x, self.x, self.values))

    def check_value_function(self, model: ValidatedModel, tol=1e-9):
        """Assert the bound 0 <= v <= c_bar/q and monotonicity in x."""
        ceil = model.value_ceiling
        lo = float(self.values.min())
        hi = float(self.values.max())
        slack = tol * max(1.0, ceil)
        if lo < -slack or hi > ceil + slack:
            raise ValueError(f"values outside [0, {ceil}]: min={lo}, max={hi}")
        if np.any(np.diff(self.values) < -slack):
            raise ValueError("value curve is not non-decreasing in x")

    def to_csv(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write("x,value\n")
            for x, v in zip(self.x, self.values):
                fh.write(f"{x:.12g},{v:.12g}\n")

    @classmethod
    def from_csv(cls, path, grid=None):
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        x, v = data[:, 0], data[:, 1]
        if grid is None:
            grid = XGrid.make(float(x[-1]), float(x[1] - x[0]))
        return cls(grid, v)


@dataclass(frozen=True)
class SegmentProblem:
    """One interval solve of L_c(v) = 0 under the applicable boundary regime.

    ``boundary`` carries the anchored value: at the left end a for c > p
    (value 0 when a = 0), at the right end b for c < p, and must be None for
    c = p where the equation is an explicit Volterra identity.  ``context``
    supplies the composite solution on [0, a) entering the convolution.
    """

    c: float
    a: float
    b: float
    boundary: float | None
    context: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("segment needs a < b")


@dataclass(frozen=True)
class SegmentSolution:
    """Solution values on the nodes of [a, b] (inclusive)."""

    grid: XGrid
    lo: int
    hi: int
    values: np.ndarray

    @property
    def x(self):
        return self.grid.nodes[self.lo : self.hi + 1]


class Quadrature:
    """Precomputed cdf increments for a (grid, distribution) pair.

    w[i]  = F((i+1)h) - F(ih)            full-cell weights
    wp[j] = F(jh + h/2) - F(jh)          partial end-cell for half-step points
    """

    def __init__(self, grid: XGrid, dist):
        self.grid = grid
        self.dist = dist
        h = grid.h
        edges = np.arange(grid.n + 1) * h
        F = dist.cdf(edges)
        self.F_nodes = F
        self.w = np.diff(F)
        self.wp = dist.cdf(edges[:-1] + 0.5 * h) - F[:-1]

    def conv_all(self, values):
        """Convolution int_0^{x_j} v(x_j - a) dF(a) at every node j at once."""
        mid = 0.5 * (values[:-1] + values[1:])
        n = self.grid.n
        if n > 512:
            size = 1
            while size < 2 * n:
                size *= 2
            prod = np.fft.irfft(
                np.fft.rfft(mid, size) * np.fft.rfft(self.w, size), size
            )[: n]
        else:
            prod = np.convolve(mid, self.w)[:n]
        out = np.empty(n + 1)
        out[0] = 0.0
        out[1:] = prod
        return out

    def conv_at(self, values, j):
        """Convolution at node j only."""
        if j == 0:
            return 0.0
        mid = 0.5 * (values[j - 1 :: -1] + values[j:0:-1])
        return float(mid @ self.w[:j])


def tail_point(dist, mass=TAIL_MASS_TOL, x_hint=1.0):
    """Smallest x (up to 1%) with 1 - F(x) < mass."""
    x = x_hint
    while 1.0 - dist.cdf(x) >= mass:
        x *= 2.0
        if x > 1e9:
            raise GridTooShort("claim tail does not decay below requested mass")
    lo, hi = x / 2.0, x
    while hi - lo > 0.01 * lo:
        mid = 0.5 * (lo + hi)
        if 1.0 - dist.cdf(mid) < mass:
            hi = mid
        else:
            lo = mid
    return hi


def default_residual_tol(model: ValidatedModel):
    """Scale-free residual tolerance 1e-6 * (c_bar / q)."""
    return 1e-6 * model.value_ceiling


def convolve(curve: ValueCurve, dist, x) -> float:
    """Stieltjes integral int_0^x v(x-a) dF(a) by midpoint-increment quadrature."""
    j = curve.grid.index_of(x)
    return Quadrature(curve.grid, dist).conv_at(curve.values, j)


def _derivatives(values, h):
    """Second-order derivative estimates: central interior, one-sided ends."""
    d = np.empty_like(values)
    d[1:-1] = (values[2:] - values[:-2]) / (2.0 * h)
    d[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * h)
    d[-1] = (3.0 * values[-1] - 4.0 * values[-2] + values[-3]) / (2.0 * h)
    return d


def _one_sided(values, j, h, side):
    if side == "left":
        if j >= 2:
            return (3.0 * values[j] - 4.0 * values[j - 1] + values[j - 2]) / (2.0 * h)
        return (values[j] - values[j - 1]) / h
    if j <= len(values) - 3:
        return (-3.0 * values[j] + 4.0 * values[j + 1] - values[j + 2]) / (2.0 * h)
    return (values[j + 1] - values[j]) / h


def apply_operator(curve: ValueCurve, c, x, model: ValidatedModel) -> float:
    """Evaluate L_c(v)(x) at a grid node of the curve."""
    grid = curve.grid
    j = grid.index_of(x)
    quad = Quadrature(grid, model.claims)
    conv = quad.conv_at(curve.values, j)
    v = curve.values
    if 0 < j < grid.n:
        dv = (v[j + 1] - v[j - 1]) / (2.0 * grid.h)
    elif j == 0:
        dv = _one_sided(v, 0, grid.h, "right")
    else:
        dv = _one_sided(v, grid.n, grid.h, "left")
    return float(
        c + (model.p - c) * dv - (model.q + model.beta) * v[j] + model.beta * conv
    )


def operator_residuals(values, c, model: ValidatedModel, grid: XGrid, quad=None, kinks=()):
    """L_c(v) at every node, with kink-aware derivative stencils.

    At each node listed in ``kinks`` the derivative is taken one-sided from
    the side that maximizes the operator (the relevant side for supersolution
    checks: left when p > c, right when p < c), so a slope kink from pasting
    does not pollute the residual with O(1/h) noise.
    """
    if quad is None:
        quad = Quadrature(grid, model.claims)
    conv = quad.conv_all(values)
    dv = _derivatives(values, grid.h)
    res = c + (model.p - c) * dv - (model.q + model.beta) * values + model.beta * conv
    for j in kinks:
        if j <= 0 or j >= grid.n:
            continue
        side = "left" if model.p > c else "right"
        dj = _one_sided(values, j, grid.h, side)
        res[j] = c + (model.p - c) * dj - (model.q + model.beta) * values[j] + model.beta * conv[j]
    return res


# ---------------------------------------------------------------------------
# marching machinery
# ---------------------------------------------------------------------------


class AffineFamily:
    """Result of a basis-pair march: the solution set {part + A * hom}."""

    def __init__(self, grid, lo, hi, part, hom):
        self.grid = grid
        self.lo = lo
        self.hi = hi
        self.part = part
        self.hom = hom

    def member(self, A):
        return self.part + A * self.hom

    def match_at(self, j, target):
        """Matching constant A with part(x_j) + A*hom(x_j) = target."""
        hj = self.hom[j]
        if abs(hj) < 1e-12:
            raise SuperpositionIllConditioned(
                f"homogeneous basis value {hj:.3e} at node {j} too small"
            )
        return (target - self.part[j]) / hj


def _march_family(model, quad, c, starts, anchors, inhom, contexts, j_end, pairs=(), cap=RENORM_CAP):
    """Integrate L_c(v) = 0 left-to-right for a batch of family members.

    starts, anchors, inhom are (B,) arrays: the node where each member
    begins, its value there, and whether it carries the inhomogeneous parts
    (the constant c and the context convolution).  ``contexts`` is (n+1, B)
    holding composite values below each member's start (zeros for homogeneous
    members).  ``c`` is a scalar rate or a (j_end, B) matrix of per-cell,
    per-member rates (piecewise payout profiles).  Classical 4-stage steps;
    the node convolution is predicted by linear extrapolation of the new
    value and refreshed once after the step.  Returns the (j_end+1, B) matrix
    of composite node values.
    """
    grid = quad.grid
    h, w, wp = grid.h, quad.w, quad.wp
    p, q, beta = model.p, model.q, model.beta
    qb = q + beta
    B = len(starts)
    starts = np.asarray(starts)
    anchors = np.asarray(anchors, dtype=float)
    inhom = np.asarray(inhom, dtype=float)
    rate_matrix = None if np.isscalar(c) else np.asarray(c, dtype=float)

    contexts = np.asarray(contexts, dtype=float)
    C = np.array(contexts[: j_end + 1], dtype=float, copy=True)  # composites
    M = np.empty((j_end, B))  # cell-mid values
    # cells fully inside the context keep the context values (the obstacle
    # side of a paste point), including the cell just below each start
    M[:] = 0.5 * (C[:-1] + C[1:])
    for b in range(B):
        C[starts[b], b] = anchors[b]

    conv_cur = np.zeros(B)
    if rate_matrix is None:
        cterm = inhom * c
        pc = p - c

    def f(v, cv):
        return (qb * v - cterm - beta * cv) / pc

    j0 = int(starts.min())
    for b in range(B):
        if starts[b] == j0:
            conv_cur[b] = w[:j0] @ M[:j0, b][::-1] if j0 else 0.0

    for j in range(j0, j_end):
        act = starts <= j
        fresh = starts == j
        if j > j0 and fresh.any():
            for b in np.nonzero(fresh)[0]:
                conv_cur[b] = w[:j] @ M[:j, b][::-1]
        if rate_matrix is not None:
            cj = rate_matrix[j]
            cterm = inhom * cj
            pc = p - cj
        v = C[j]
        k1 = f(v, conv_cur)
        # half-point convolution: full cells hit exact nodes, plus the
        # partial cell [jh, jh + h/2] whose midpoint maps to x = h/4; on the
        # very first step the value above the anchor is not known yet, so it
        # comes from an Euler prediction instead of the raw context
        if j:
            v_quarter = 0.75 * C[0] + 0.25 * C[1]
            conv_half = w[:j] @ C[j:0:-1] + wp[j] * v_quarter
        else:
            v_quarter = C[0] + 0.25 * h * k1
            conv_half = wp[0] * v_quarter
        k2 = f(v + 0.5 * h * k1, conv_half)
        k3 = f(v + 0.5 * h * k2, conv_half)
        pred = np.where(starts <= j - 1, 2.0 * C[j] - C[j - 1], C[j] + h * k1)
        base = w[1 : j + 1] @ M[:j][::-1] if j else 0.0
        conv_next = base + 0.5 * w[0] * (C[j] + pred)
        k4 = f(v + h * k3, conv_next)
        new = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        # refresh the self-weight of the node convolution once
        conv_next = conv_next + 0.5 * w[0] * (new - pred)
        k4 = f(v + h * k3, conv_next)
        new2 = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        conv_next = conv_next + 0.5 * w[0] * (new2 - new)

        C[j + 1] = np.where(act, new2, C[j + 1])
        M[j] = np.where(act, 0.5 * (C[j] + C[j + 1]), M[j])
        conv_cur = np.where(act, conv_next, conv_cur)

        for ip, ih in pairs:
            m = max(abs(C[j + 1, ip]), abs(C[j + 1, ih]))
            if m > cap and abs(C[j + 1, ih]) > 0.0:
                mu = C[j + 1, ip] / C[j + 1, ih]
                C[:, ip] -= mu * C[:, ih]
                M[:, ip] -= mu * M[:, ih]
                conv_cur[ip] -= mu * conv_cur[ih]
                sigma = C[j + 1, ih]
                C[:, ih] /= sigma
                M[:, ih] /= sigma
                conv_cur[ih] /= sigma
    return C


def _basis_pair(model, quad, c, start, j_end, context=None, anchor_part=0.0):
    """Particular/homogeneous basis of L_c(v)=0 on nodes [start, j_end]."""
    n = quad.grid.n
    ctx = np.zeros((n + 1, 2))
    if context is not None:
        ctx[:, 0] = context
    C = _march_family(
        model,
        quad,
        c,
        starts=[start, start],
        anchors=[anchor_part, 1.0],
        inhom=[1.0, 0.0],
        contexts=ctx,
        j_end=j_end,
        pairs=[(0, 1)],
    )
    return AffineFamily(quad.grid, start, j_end, C[:, 0], C[:, 1])


def _march_single(model, quad, c, start, anchor, j_end, context=None):
    """Single causal member (used when the anchored end is the stable one)."""
    n = quad.grid.n
    ctx = np.zeros((n + 1, 1))
    if context is not None:
        ctx[:, 0] = context
    C = _march_family(
        model,
        quad,
        c,
        starts=[start],
        anchors=[anchor],
        inhom=[1.0],
        contexts=ctx,
        j_end=j_end,
    )
    return C[:, 0]


def _volterra_march(model, quad, start=0, context=None, j_end=None):
    """Explicit march for the degenerate rate c = p.

    L_p(v) = 0 has no derivative term:  v(x) = (p + beta*conv(v)(x))/(q+beta),
    solved node by node; the self-weight of the newest node is absorbed into
    the denominator.
    """
    grid = quad.grid
    n = grid.n
    if j_end is None:
        j_end = n
    p, q, beta = model.p, model.q, model.beta
    w = quad.w
    qb = q + beta
    v = np.zeros(n + 1) if context is None else np.array(context, dtype=float)
    mid = 0.5 * (v[:-1] + v[1:])
    if start == 0:
        v[0] = p / qb
        if n:
            mid[0] = 0.5 * (v[0] + v[1])
    for j in range(max(start, 1), j_end + 1):
        rest = w[1:j] @ mid[j - 2 :: -1] if j > 1 else 0.0
        rest += 0.5 * w[0] * v[j - 1]
        v[j] = (p + beta * rest) / (qb - 0.5 * beta * w[0])
        mid[j - 1] = 0.5 * (v[j - 1] + v[j])
    return v


def solve_top_level(model: ValidatedModel, grid: XGrid) -> ValueCurve:
    """Value of paying the ceiling rate forever: L_{c_bar}(v) = 0 on the grid.

    c_bar < p: basis-pair superposition matched to c_bar/q at x_max (the
    growing homogeneous mode cancels there).  c_bar = p: explicit Volterra
    march.  c_bar > p: v(0) = 0 and a stable left-to-right march.
    """
    tail = 1.0 - model.claims.cdf(grid.x_max)
    if not tail < TAIL_MASS_TOL:
        raise GridTooShort(
            f"1 - F(x_max) = {tail:.3e} >= {TAIL_MASS_TOL}; extend the grid"
        )
    quad = Quadrature(grid, model.claims)
    c = model.c_bar
    if c < model.p:
        fam = _basis_pair(model, quad, c, 0, grid.n)
        A = fam.match_at(grid.n, model.value_ceiling)
        values = fam.member(A)
    elif c == model.p:
        values = _volterra_march(model, quad)
    else:
        values = _march_single(model, quad, c, 0, 0.0, grid.n)
    return ValueCurve(grid, values)


def solve_segment(problem: SegmentProblem, model: ValidatedModel, grid: XGrid) -> SegmentSolution:
    """Solve L_c(v) = 0 on [a, b] under the regime-appropriate boundary.

    c > p: anchored at the left end (v(0) = 0 when a = 0); c < p: anchored at
    the right end via a basis pair; c = p: explicit Volterra march with no
    boundary value.  The context curve must cover [0, a) when a > 0 so the
    convolution is defined on the whole segment.
    """
    lo = grid.index_of(problem.a)
    hi = grid.index_of(problem.b)
    c = problem.c
    context = problem.context
    if lo > 0:
        if context is None:
            raise ContextIncomplete("segment with a > 0 requires a context curve")
        context = np.asarray(context, dtype=float)
        if context.shape != (grid.n + 1,):
            raise ContextIncomplete("context must supply one value per grid node")
        if not np.all(np.isfinite(context[: lo + 1])):
            raise ContextIncomplete("context has non-finite values below the segment")
    quad = Quadrature(grid, model.claims)
    if c == model.p:
        if problem.boundary is not None:
            raise ValueError("c = p segment admits no boundary value")
        values = _volterra_march(model, quad, start=lo, context=context, j_end=hi)
    elif c > model.p:
        if lo == 0:
            anchor = 0.0 if problem.boundary is None else problem.boundary
        else:
            if problem.boundary is None:
                raise ValueError("c > p segment with a > 0 requires a left boundary value")
            anchor = problem.boundary
        values = _march_single(model, quad, c, lo, anchor, hi, context=context)
    else:
        if problem.boundary is None:
            raise ValueError("c < p segment requires a right boundary value")
        fam = _basis_pair(model, quad, c, lo, hi, context=context)
        A = fam.match_at(hi, problem.boundary)
        values = fam.member(A)
    return SegmentSolution(grid, lo, hi, values[lo : hi + 1])


@dataclass(frozen=True)
class ResidualReport:
    """Diagnostics for one adjacent-rate pair of a value surface."""

    c: float
    c_plus: float
    max_operator: float
    max_c_difference: float
    max_complementarity: float

    def within(self, tol):
        return (
            self.max_operator <= tol
            and self.max_c_difference <= tol
            and self.max_complementarity <= tol
        )


def hjb_residual(lower: ValueCurve, upper: ValueCurve, c, c_plus, model: ValidatedModel, kinks=()) -> ResidualReport:
    """Check max{L_c(u), u_c} = 0 on the slice pair (V(.,c), V(.,c+)).

    Reports the largest operator value on the lower slice, the largest forward
    c-difference quotient (non-positive up to tolerance for a value surface),
    and the complementarity defect min(|L|, |u_c|).
    """
    grid = lower.grid
    res = operator_residuals(lower.values, c, model, grid, kinks=kinks)
    dc = c_plus - c
    u_c = (upper.values - lower.values) / dc
    comp = np.minimum(np.abs(res), np.abs(u_c))
    return ResidualReport(
        c=c,
        c_plus=c_plus,
        max_operator=float(res.max()),
        max_c_difference=float(u_c.max()),
        max_complementarity=float(comp.max()),
    )
