"""Backward obstacle-problem recursion over a finite dividend-rate grid.

The top rate solves the plain constant-rate equation; each lower rate c_k
solves max{L_{c_k}(v), obstacle - v} = 0 where the obstacle is the slice one
rate above.  Change sets are found parametrically:

* c_k > p: the surplus drifts down, so the problem is causal left-to-right
  and the change set falls out of a marched pointwise maximum between the
  continuation step and the obstacle.
* c_k = p: the drift vanishes and the equation is an explicit Volterra
  identity; same pointwise maximum, no stepping.
* c_k < p: change sets [d, inf) are scanned through the affine solution
  family W^d = part + A(d) * hom of the rate-c_k equation; the value at the
  probe x = 0 is maximized simultaneously with the value at every other node
  because the candidates differ by A * hom with hom > 0.  If the verified
  supersolution check fails, the two-component family [0, d1] u [d2, inf) is
  searched with a batched basis pair per left endpoint.

Every accepted level is certified: the slice must dominate its obstacle and
the operator residual must stay non-positive (up to tolerance) on the change
set, which by the verification argument for supersolutions identifies the
slice with the restricted optimal value function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ObstacleInvalid, VerificationFailed
from .ide_core import (
    Quadrature,
    ValueCurve,
    XGrid,
    _basis_pair,
    operator_residuals,
    solve_top_level,
)
from .model import ValidatedModel

__all__ = [
    "RateGrid",
    "ChangeSet",
    "ValueSurface",
    "FiniteStrategy",
    "build_rate_grid",
    "solve_obstacle_level",
    "backward_recursion",
    "convergence_table",
    "extract_free_boundary",
]

# Dominance slack and one-sided residual ceiling used when certifying a
# candidate change set, both relative to the value ceiling c_bar/q.  The
# residual ceiling sits at half the acceptance tolerance: the certification
# diagnostic itself carries O(h^2) stencil error scaled by the model's
# coefficients, so it cannot be pushed arbitrarily low.
DOMINANCE_TOL_REL = 1e-7
RESIDUAL_VERIFY_REL = 5e-4
# A(d) ties within this relative slack resolve to the smallest d.
TIE_TOL_REL = 1e-10
# Skip guard when fast-forwarding through pasted stretches: only nodes where
# the obstacle residual exceeds -guard can un-paste.
SKIP_GUARD_REL = 1e-3
# When c_bar < p the top slice is pinned to c_bar/q at x_max, which leaves a
# boundary layer of the fast-growing homogeneous mode near the grid end; all
# certification happens on the trust window below this fraction of x_max.
VERIFY_FRACTION = 0.75


@dataclass(frozen=True)
class RateGrid:
    """Ordered dividend rates c_1 < ... < c_N with c_N = c_bar."""

    rates: tuple
    level: int

    def __post_init__(self):
        r = tuple(float(c) for c in self.rates)
        if len(r) < 1 or any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError("rates must be strictly increasing")
        object.__setattr__(self, "rates", r)

    def __len__(self):
        return len(self.rates)

    @property
    def c_bar(self):
        return self.rates[-1]

    def index_at_least(self, c):
        """Smallest k with rates[k] >= c."""
        for k, ck in enumerate(self.rates):
            if ck >= c - 1e-12 * max(1.0, abs(c)):
                return k
        raise ValueError(f"rate {c} above the grid ceiling {self.c_bar}")


def build_rate_grid(n: int, model: ValidatedModel) -> RateGrid:
    """Dyadic rate grid {k c_bar / 2^n} with p inserted when c_bar > p."""
    if n < 0:
        raise ValueError("refinement level must be >= 0")
    c_bar = model.c_bar
    rates = [k * c_bar / 2**n for k in range(2**n + 1)]
    if c_bar > model.p and not any(r == model.p for r in rates):
        rates.append(model.p)
        rates.sort()
    return RateGrid(rates=tuple(rates), level=n)


@dataclass(frozen=True)
class ChangeSet:
    """Closed x-intervals where rate k is abandoned for the next rate up.

    ``intervals`` holds (start, end) pairs with end = math.inf for a
    right-unbounded component; endpoints are grid nodes.
    """

    rate_index: int
    intervals: tuple

    def __post_init__(self):
        ivs = tuple((float(a), float(b)) for a, b in self.intervals)
        for a, b in ivs:
            if not a <= b:
                raise ValueError(f"empty interval ({a}, {b})")
        for (_, b0), (a1, _) in zip(ivs, ivs[1:]):
            if not b0 < a1:
                raise ValueError("intervals must be disjoint and sorted")
        object.__setattr__(self, "intervals", ivs)

    def contains(self, x):
        return any(a <= x <= b for a, b in self.intervals)

    @property
    def right_unbounded(self):
        return bool(self.intervals) and math.isinf(self.intervals[-1][1])


@dataclass(frozen=True)
class ValueSurface:
    """One value curve per rate of a RateGrid, on a common x-grid."""

    rate_grid: RateGrid
    grid: XGrid
    values: np.ndarray  # (N, n+1)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.rate_grid), self.grid.n + 1):
            raise ValueError("surface shape must be (N rates, n+1 nodes)")
        object.__setattr__(self, "values", v)

    def slice_at(self, k) -> ValueCurve:
        return ValueCurve(self.grid, self.values[k])

    def validate(self, model: ValidatedModel, tol=1e-9):
        ceil = model.value_ceiling
        slack = tol * max(1.0, ceil)
        if self.values.min() < -slack or self.values.max() > ceil + slack:
            raise ValueError("surface violates the bound 0 <= V <= c_bar/q")
        if np.any(np.diff(self.values, axis=1) < -slack):
            raise ValueError("surface slices must be non-decreasing in x")
        if np.any(np.diff(self.values, axis=0) > slack):
            raise ValueError("surface must be non-increasing in the rate index")

    def to_csv(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write("x,c,value\n")
            x = self.grid.nodes
            for k, c in enumerate(self.rate_grid.rates):
                for xi, vi in zip(x, self.values[k]):
                    fh.write(f"{xi:.12g},{c:.12g},{vi:.12g}\n")


@dataclass(frozen=True)
class FiniteStrategy:
    """A rate grid plus the change set of every rate below the ceiling."""

    rate_grid: RateGrid
    change_sets: tuple  # ChangeSet for k = 0..N-2

    def __post_init__(self):
        if len(self.change_sets) != len(self.rate_grid) - 1:
            raise ValueError("need one change set per rate below the ceiling")
        object.__setattr__(self, "change_sets", tuple(self.change_sets))

    def region_to_csv(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write("c,interval_start,interval_end\n")
            for k, cs in enumerate(self.change_sets):
                c = self.rate_grid.rates[k]
                for a, b in cs.intervals:
                    end = "inf" if math.isinf(b) else f"{b:.12g}"
                    fh.write(f"{c:.12g},{a:.12g},{end}\n")


# ---------------------------------------------------------------------------
# per-level solvers
# ---------------------------------------------------------------------------


def _check_obstacle(obstacle, model, grid):
    if obstacle.shape != (grid.n + 1,):
        raise ObstacleInvalid("obstacle length must equal node count")
    if not np.all(np.isfinite(obstacle)):
        raise ObstacleInvalid("obstacle has non-finite values")
    ceil = model.value_ceiling
    slack = 1e-6 * max(1.0, ceil)
    if obstacle.min() < -slack or obstacle.max() > ceil + slack:
        raise ObstacleInvalid("obstacle violates the bound 0 <= v <= c_bar/q")


def _rk4_step_scalar(model, quad, c, v, mid, j, conv_j):
    """One scalar RK4 step j -> j+1 of L_c(v)=0 on the composite arrays.

    Returns the stepped value and the node convolution at j+1 consistent with
    it (predicted by extrapolation, refreshed once after the step).
    """
    grid = quad.grid
    h, w, wp = grid.h, quad.w, quad.wp
    beta, qb, pc = model.beta, model.q + model.beta, model.p - c

    def f(val, cv):
        return (qb * val - c - beta * cv) / pc

    vj = v[j]
    k1 = f(vj, conv_j)
    if j:
        conv_half = w[:j] @ v[j:0:-1] + wp[j] * (0.75 * v[0] + 0.25 * v[1])
    else:
        conv_half = wp[0] * (vj + 0.25 * h * k1)
    k2 = f(vj + 0.5 * h * k1, conv_half)
    k3 = f(vj + 0.5 * h * k2, conv_half)
    pred = 2.0 * vj - v[j - 1] if j else vj + h * k1
    base = w[1 : j + 1] @ mid[:j][::-1] if j else 0.0
    conv_next = base + 0.5 * w[0] * (vj + pred)
    k4 = f(vj + h * k3, conv_next)
    new = vj + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    conv_next = conv_next + 0.5 * w[0] * (new - pred)
    k4 = f(vj + h * k3, conv_next)
    new2 = vj + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    conv_next = conv_next + 0.5 * w[0] * (new2 - new)
    return new2, conv_next


def _max_march_level(model, quad, c, obstacle, guard):
    """Obstacle level for c >= p: causal march of max(continuation, obstacle).

    With downward (or zero) drift the continuation value at a node depends
    only on nodes to its left, so v(x) = max(obstacle(x), continuation(x)) is
    an exact one-pass dynamic program.  The composite starts as the obstacle
    and is overwritten wherever waiting beats switching.  Pasted stretches are
    fast-forwarded to the next node whose obstacle residual L_c(obstacle)
    rises above -guard, the only places un-pasting can occur.
    """
    grid = quad.grid
    n = grid.n
    w = quad.w
    beta, qb, p = model.beta, model.q + model.beta, model.p
    v = obstacle.copy()
    pasted = np.ones(n + 1, dtype=bool)
    res_obst = operator_residuals(obstacle, c, model, grid, quad=quad)
    can_unpaste = res_obst > -guard
    volterra = c == p

    # value at x = 0: waiting is worth p/(q+beta) at c = p (hold until the
    # first claim) and 0 above p (immediate ruin); ties stay un-pasted so the
    # ruin state does not show up as a spurious change component
    start_val = p / qb if volterra else 0.0
    if obstacle[0] > start_val:
        v[0] = obstacle[0]
    else:
        v[0] = start_val
        pasted[0] = False

    mid = 0.5 * (v[:-1] + v[1:])
    conv_j = None
    j = 0
    while j < n:
        if pasted[j]:
            nxt = j + 1
            while nxt <= n and not can_unpaste[nxt]:
                nxt += 1
            if nxt > n:
                break
            if nxt - 1 > j:
                j = nxt - 1
            conv_j = None
        if volterra:
            rest = w[1 : j + 1] @ mid[:j][::-1] if j else 0.0
            rest += 0.5 * w[0] * v[j]
            cand = (p + beta * rest) / (qb - 0.5 * beta * w[0])
        else:
            if conv_j is None:
                conv_j = quad.conv_at(v, j)
            cand, conv_next = _rk4_step_scalar(model, quad, c, v, mid, j, conv_j)
        if cand > obstacle[j + 1]:
            v[j + 1] = cand
            pasted[j + 1] = False
        else:
            v[j + 1] = obstacle[j + 1]
            if not volterra:
                conv_next = conv_next + 0.5 * w[0] * (v[j + 1] - cand)
        mid[j] = 0.5 * (v[j] + v[j + 1])
        if not volterra:
            conv_j = conv_next
        j += 1
    return v, pasted


def _smooth_fit_select(grid, part, hom, obstacle, cap, tie_tol, lo=2):
    """Pick the paste node by the first-order condition of the affine family.

    The family value at every x is monotone in the matching constant
    A(d) = (g(d) - part(d)) / hom(d), and A'(d) = -S(d)/hom(d) where
    S(d) = W_d'(d-) - g'(d+) is the smooth-fit defect.  Near the rate ceiling
    A is flat far below double precision while S stays O(slope), so the
    boundary is located at the sign change of S; among multiple crossings the
    one with the largest A wins, ties resolving to the smallest d.

    Returns (j_star, A_star, A_values); j_star = cap signals that the
    threshold lies at or beyond the scan edge.
    """
    h = grid.h
    js = np.arange(lo, cap - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        A = (obstacle[js] - part[js]) / hom[js]
        dW = (3.0 * part[js] - 4.0 * part[js - 1] + part[js - 2]) / (2.0 * h) + A * (
            3.0 * hom[js] - 4.0 * hom[js - 1] + hom[js - 2]
        ) / (2.0 * h)
    dg = (-3.0 * obstacle[js] + 4.0 * obstacle[js + 1] - obstacle[js + 2]) / (2.0 * h)
    S = dW - dg
    valid = np.abs(hom[js]) > 1e-300
    A = np.where(valid, A, -np.inf)
    crossings = np.flatnonzero((S[:-1] <= 0.0) & (S[1:] > 0.0) & valid[:-1])
    if crossings.size == 0:
        if np.all(S[valid] > 0.0):
            return 0, None, A  # switching immediately dominates everywhere
        return cap, None, A  # still waiting at the scan edge
    best = crossings[np.argmax(A[crossings])]
    ok = crossings[A[crossings] >= A[best] - tie_tol]
    j_rel = int(ok[0])
    return int(js[j_rel]), float(A[j_rel]), A


def _phase_one_family(model, quad, c, obstacle, cap, j_scan_max, tie_tol):
    """Best one-component change set [d, inf) through the affine family.

    Candidate thresholds stay inside the certification window; a winner at
    its edge means the change structure ran into the untrusted tail.
    """
    grid = quad.grid
    cap = min(cap, j_scan_max)
    while True:
        fam = _basis_pair(model, quad, c, 0, cap)
        j_star, A, _ = _smooth_fit_select(grid, fam.part, fam.hom, obstacle, cap, tie_tol)
        if j_star < cap:
            if j_star == 0:
                return 0, None, fam
            return j_star, A, fam
        if cap == j_scan_max:
            raise VerificationFailed(
                f"rate {c}: change threshold ran into the untrusted grid tail; "
                "enlarge x_max",
                diagnostics={"rate": c, "j_star": j_star},
            )
        cap = min(j_scan_max, 2 * cap)


def _dominance_violations(values, obstacle, lo, hi, tol):
    """Nodes in [lo, hi) where the candidate falls below the obstacle."""
    gap = obstacle[lo:hi] - values[lo:hi]
    return np.flatnonzero(gap > tol) + lo


def _residual_violation(slice_values, c, model, quad, mask, kinks, tol):
    res = operator_residuals(slice_values, c, model, quad.grid, quad=quad, kinks=kinks)
    bad = res > tol
    bad &= mask
    return res, np.flatnonzero(bad)


def _assemble_phase1(obstacle, fam, j_star, A):
    if j_star == 0:
        return obstacle.copy()
    out = obstacle.copy()
    member = fam.member(A)
    out[:j_star] = member[:j_star]
    return out


def _phase_two_family(model, quad, c, obstacle, j_feat, cap, j_scan_max, tie_tol):
    """Two-component change sets [0, d1] u [d2, inf).

    For each left endpoint d1 the right endpoint and matching constant come
    from the smooth-fit selection inside that d1's affine family (the basis
    pairs for all candidate d1 march in one batch); d1 itself is selected by
    the value-continuity defect J(d1) = W(d1+) - obstacle(d1), which crosses
    zero at the optimal band (the value function of the optimal strategy is
    continuous, while the value objective is plateau-flat in d1).
    """
    from .ide_core import _march_family

    grid = quad.grid
    n = grid.n
    cap = min(max(cap, j_feat + 64), j_scan_max)
    cache = {}

    def evaluate(nodes):
        nodes = [s for s in nodes if s not in cache]
        if not nodes:
            return
        B = 2 * len(nodes)
        starts = np.repeat(nodes, 2)
        anchors = np.tile([0.0, 1.0], len(nodes))
        inhom = np.tile([1.0, 0.0], len(nodes))
        contexts = np.zeros((cap + 1, B))
        contexts[:, ::2] = obstacle[: cap + 1, None]
        C = _march_family(
            model,
            quad,
            c,
            starts=starts,
            anchors=anchors,
            inhom=inhom,
            contexts=contexts,
            j_end=cap,
            pairs=[(2 * i, 2 * i + 1) for i in range(len(nodes))],
        )
        for i, s in enumerate(nodes):
            part, hom = C[:, 2 * i], C[:, 2 * i + 1]
            j2, A2, _ = _smooth_fit_select(
                grid, part, hom, obstacle, cap, tie_tol, lo=s + 3
            )
            if j2 <= s + 3 or j2 >= cap or A2 is None:
                cache[s] = None
                continue
            J = A2 - obstacle[s]  # left-limit continuity defect
            cache[s] = (J, j2, A2, part, hom)

    def select():
        # J < 0 left of the optimal d1 (the paste still beats the segment
        # limit there) and J > 0 right of it; take the first non-negative
        nodes = sorted(s for s, v in cache.items() if v is not None)
        if not nodes:
            return None, "none"
        Js = np.array([cache[s][0] for s in nodes])
        rises = np.flatnonzero((Js[:-1] < 0.0) & (Js[1:] >= 0.0))
        if rises.size:
            return nodes[int(rises[0]) + 1], "crossing"
        if np.all(Js < 0.0):
            return nodes[-1], "edge"
        # J >= 0 from the start: the left component wants to vanish
        return nodes[0], "degenerate"

    stride = max(1, j_feat // 48)
    evaluate(list(range(0, j_feat + 1, stride)) + [j_feat])
    j1, kind = select()
    if j1 is not None and stride > 1:
        evaluate(list(range(max(0, j1 - stride), min(j_feat, j1 + stride) + 1)))
        j1, kind = select()
    if j1 is None:
        raise VerificationFailed(
            f"rate {c}: two-component scan produced no valid candidates",
            diagnostics={"rate": c},
        )
    if kind == "edge" and 2 * j_feat < j_scan_max // 2:
        # left component ran into its scan edge: widen and retry
        return _phase_two_family(model, quad, c, obstacle, 2 * j_feat, cap, j_scan_max, tie_tol)
    J, j2, A2, part, hom = cache[j1]
    if j2 >= cap - 1:
        if cap >= j_scan_max:
            raise VerificationFailed(
                f"rate {c}: right change component ran into the untrusted grid tail",
                diagnostics={"rate": c, "j2": j2},
            )
        return _phase_two_family(
            model, quad, c, obstacle, j_feat, min(2 * cap, j_scan_max), j_scan_max, tie_tol
        )
    member = part + A2 * hom
    out = obstacle.copy()
    out[j1 + 1 : j2] = member[j1 + 1 : j2]
    return out, j1, j2, float(member[j1])


def solve_obstacle_level(rate_grid: RateGrid, k: int, obstacle: ValueCurve, model: ValidatedModel, grid: XGrid, quad=None, scan_hint=None):
    """Solve one obstacle level: value curve and change set for rate k.

    The obstacle is the value curve of rate k+1.  Returns a verified
    (ValueCurve, ChangeSet) pair or raises VerificationFailed with residual
    diagnostics when neither the one- nor two-component family passes.
    """
    if quad is None:
        quad = Quadrature(grid, model.claims)
    c = rate_grid.rates[k]
    obst = np.asarray(obstacle.values, dtype=float)
    _check_obstacle(obst, model, grid)
    values, intervals = _solve_level(model, quad, c, obst, scan_hint)
    return ValueCurve(grid, values), ChangeSet(k, intervals)


def _trust_mask(model, n):
    """Interior nodes inside the certification window."""
    mask = _interior(n)
    if model.c_bar <= model.p:
        mask[int(VERIFY_FRACTION * n) :] = False
    return mask


def _try_phase_one(model, quad, c, obstacle, cap, j_scan_max, tols, trust):
    """Run phase 1 and verify; returns (values, pasted) or (None, failure info)."""
    grid = quad.grid
    n = grid.n
    dom_tol, res_tol, tie_tol = tols
    j_star, A, fam = _phase_one_family(model, quad, c, obstacle, cap, j_scan_max, tie_tol)
    values = _assemble_phase1(obstacle, fam, j_star, A)
    viol = _dominance_violations(values, obstacle, 0, j_star, dom_tol)
    pasted = np.zeros(n + 1, dtype=bool)
    pasted[j_star:] = True
    kinks = (j_star,) if 0 < j_star < n else ()
    res, bad = _residual_violation(values, c, model, quad, pasted & trust, kinks, res_tol)
    if viol.size == 0 and bad.size == 0:
        return (values, pasted), None
    info = {
        "phase1_dominance_nodes": viol.tolist(),
        "phase1_residual_nodes": bad.tolist(),
        "phase1_residual_max": float(res[bad].max()) if bad.size else 0.0,
        "j_star": j_star,
    }
    return None, info


def _try_phase_two(model, quad, c, obstacle, j_feat, cap, j_scan_max, tols, trust):
    grid = quad.grid
    n = grid.n
    dom_tol, res_tol, tie_tol = tols
    values, j1, j2, left_limit = _phase_two_family(
        model, quad, c, obstacle, j_feat, cap, j_scan_max, tie_tol
    )
    pasted = np.zeros(n + 1, dtype=bool)
    pasted[: j1 + 1] = True
    pasted[j2:] = True
    if j1 == 0 and left_limit > obstacle[0] + dom_tol:
        # left component collapsed to the ruin state: waiting wins there
        pasted[0] = False
        values[0] = left_limit
    viol = _dominance_violations(values, obstacle, j1 + 1, j2, dom_tol)
    kinks = tuple(j for j in (j1, j2) if 0 < j < n)
    res, bad = _residual_violation(values, c, model, quad, pasted & trust, kinks, res_tol)
    if viol.size == 0 and bad.size == 0:
        return (values, pasted), None
    info = {
        "phase2_dominance_nodes": viol.tolist(),
        "phase2_residual_nodes": bad.tolist(),
        "phase2_residual_max": float(res[bad].max()) if bad.size else 0.0,
        "j1": j1,
        "j2": j2,
    }
    return None, info


def _solve_level(model, quad, c, obstacle, hint=None):
    """Dispatch one obstacle level by rate regime; returns (values, intervals).

    ``hint`` carries the previous (higher-rate) level's change structure:
    ("one", j_star) or ("two", j1, j2) in node units.  Nesting gives the next
    thresholds below the previous ones, so scans start tight and widen only
    on demand.
    """
    grid = quad.grid
    n = grid.n
    ceil = model.value_ceiling
    tols = (
        DOMINANCE_TOL_REL * max(1.0, ceil),
        RESIDUAL_VERIFY_REL * max(1.0, ceil),
        TIE_TOL_REL * max(1.0, ceil),
    )
    guard = SKIP_GUARD_REL * max(1.0, ceil)
    trust = _trust_mask(model, n)

    if c >= model.p:
        values, pasted = _max_march_level(model, quad, c, obstacle, guard)
        res_tol = tols[1]
        kinks = _paste_kinks(pasted)
        res, bad = _residual_violation(values, c, model, quad, pasted & trust, kinks, res_tol)
        if bad.size:
            raise VerificationFailed(
                f"rate {c}: residual {res[bad].max():.3e} on the change set",
                diagnostics={"nodes": bad.tolist(), "rate": c},
            )
        if not pasted.any():
            raise VerificationFailed(f"rate {c}: empty change set", diagnostics={"rate": c})
        return values, _mask_intervals(pasted, grid)

    j_scan_max = int(np.flatnonzero(trust).max()) + 1 if trust.any() else n
    if hint and hint[0] == "two":
        j1h, j2h = hint[1], hint[2]
        j_feat = min(max(j1h + 8, 24), n // 3)
        cap = min(j_scan_max, j2h + 64)
        solved, info2 = _try_phase_two(model, quad, c, obstacle, j_feat, cap, j_scan_max, tols, trust)
        if solved:
            values, pasted = solved
            return values, _mask_intervals(pasted, grid)
        solved, info1 = _try_phase_one(model, quad, c, obstacle, j_scan_max, j_scan_max, tols, trust)
        if solved:
            values, pasted = solved
            return values, _mask_intervals(pasted, grid)
        raise VerificationFailed(
            f"rate {c}: neither one- nor two-component change sets verify",
            diagnostics={"rate": c, **info1, **info2},
        )

    cap = j_scan_max if hint is None else min(j_scan_max, int(1.3 * hint[1]) + 64)
    solved, info1 = _try_phase_one(model, quad, c, obstacle, cap, j_scan_max, tols, trust)
    if solved:
        values, pasted = solved
        return values, _mask_intervals(pasted, grid)
    viol = info1["phase1_dominance_nodes"]
    feat = int(max(viol)) if viol else 16
    j_feat = min(max(2 * feat + 16, 24), n // 3)
    solved, info2 = _try_phase_two(
        model, quad, c, obstacle, j_feat, info1["j_star"] + 64, j_scan_max, tols, trust
    )
    if solved:
        values, pasted = solved
        return values, _mask_intervals(pasted, grid)
    raise VerificationFailed(
        f"rate {c}: neither one- nor two-component change sets verify",
        diagnostics={"rate": c, **info1, **info2},
    )


def _interior(n):
    m = np.ones(n + 1, dtype=bool)
    m[0] = m[-1] = False
    return m


def _paste_kinks(pasted):
    edges = np.flatnonzero(np.diff(pasted.astype(int)) != 0) + 1
    return tuple(int(e) for e in edges)


def _mask_intervals(mask, grid):
    idx = np.flatnonzero(mask)
    intervals = []
    if idx.size:
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.concatenate(([0], breaks + 1))
        ends = np.concatenate((breaks, [idx.size - 1]))
        for s, e in zip(starts, ends):
            a = idx[s] * grid.h
            b = math.inf if idx[e] == grid.n else idx[e] * grid.h
            intervals.append((a, b))
    return tuple(intervals)


def backward_recursion(rate_grid: RateGrid, model: ValidatedModel, grid: XGrid):
    """Full backward recursion: top slice down to rate c_1.

    Returns (ValueSurface, FiniteStrategy); level failures propagate with the
    failing rate index attached.
    """
    quad = Quadrature(grid, model.claims)
    N = len(rate_grid)
    V = np.empty((N, grid.n + 1))
    V[N - 1] = solve_top_level(model, grid).values
    change_sets = []
    hint = None
    for k in range(N - 2, -1, -1):
        c = rate_grid.rates[k]
        try:
            values, intervals = _solve_level(model, quad, c, V[k + 1], hint)
        except VerificationFailed as exc:
            exc.diagnostics["rate_index"] = k
            raise
        V[k] = values
        change_sets.append(ChangeSet(k, intervals))
        hint = _hint_from_intervals(intervals, grid)
    change_sets.reverse()
    surface = ValueSurface(rate_grid, grid, V)
    strategy = FiniteStrategy(rate_grid, tuple(change_sets))
    return surface, strategy


def _hint_from_intervals(intervals, grid):
    if not intervals:
        return None
    if len(intervals) == 1:
        return ("one", int(round(intervals[0][0] / grid.h)))
    return (
        "two",
        int(round(intervals[0][1] / grid.h)),
        int(round(intervals[-1][0] / grid.h)),
    )


def convergence_table(model: ValidatedModel, grid: XGrid, n_max=8):
    """max_x {V^{n_max}(x, 0) - V^n(x, 0)} for n = 0..n_max-1.

    All refinements share the same x-grid; entries are non-negative and
    non-increasing because the rate grids are nested.
    """
    slices = {}
    for n in range(n_max + 1):
        rg = build_rate_grid(n, model)
        surface, _ = backward_recursion(rg, model, grid)
        slices[n] = surface.values[0]
    top = slices[n_max]
    return [
        {"n": n, "max_diff": float(np.max(top - slices[n]))} for n in range(n_max)
    ]


def extract_free_boundary(strategy: FiniteStrategy):
    """Free boundary curve(s) on the x-grid of the strategy's change sets.

    For nested right-unbounded change sets returns a dict with key ``c_star``:
    the step function max{c_k : d_k <= x} (0 when below every threshold).  If
    any change set has a left component the two-boundary form is returned
    with keys ``c1_star`` (at or above it, jump straight to the ceiling) and
    ``c2_star`` (below it, climb to it), with c2_star <= c1_star.
    """
    rates = strategy.rate_grid.rates
    c_bar = rates[-1]
    sets = strategy.change_sets
    if not sets:
        return {"kind": "degenerate", "c_star": c_bar}
    two_sided = any(len(cs.intervals) > 1 or not cs.right_unbounded for cs in sets)
    if not two_sided:
        thresholds = [(cs.intervals[0][0], rates[k]) for k, cs in enumerate(sets)]
        return {"kind": "nested", "thresholds": thresholds, "c_bar": c_bar}
    lefts, rights = [], []
    for k, cs in enumerate(sets):
        left_end = None
        right_start = None
        for a, b in cs.intervals:
            if a == 0.0 and not math.isinf(b):
                left_end = b
            if math.isinf(b):
                right_start = a
        lefts.append(left_end)
        rights.append(right_start)
    return {
        "kind": "two_sided",
        "left_ends": lefts,
        "right_starts": rights,
        "rates": list(rates[:-1]),
        "c_bar": c_bar,
    }


def boundary_on_grid(strategy: FiniteStrategy, grid: XGrid):
    """Evaluate the free boundary as step function(s) on the grid nodes."""
    info = extract_free_boundary(strategy)
    x = grid.nodes
    rates = strategy.rate_grid.rates
    c_bar = rates[-1]
    if info["kind"] == "degenerate":
        return {"x": x, "c_star": np.full_like(x, c_bar)}
    if info["kind"] == "nested":
        c_star = np.zeros_like(x)
        for d, c in info["thresholds"]:
            c_star[x >= d] = np.maximum(c_star[x >= d], c)
        return {"x": x, "c_star": c_star}
    c1 = np.full_like(x, c_bar)
    c2 = np.full_like(x, c_bar)
    for k in range(len(rates) - 2, -1, -1):
        le = info["left_ends"][k]
        rs = info["right_starts"][k]
        ck = rates[k]
        if le is not None:
            c1[x <= le] = ck
        if rs is not None:
            c2[x < rs] = np.minimum(c2[x < rs], ck)
    # below the lowest left component everything jumps to the ceiling
    c2 = np.minimum(c2, c1)
    return {"x": x, "c1_star": c1, "c2_star": c2}
