"""Benchmark without the ratcheting constraint.

The unconstrained optimal dividend strategy is stationary with a band
structure; the four worked presets fall into its two simplest families,
which are the only ones searched here:

* threshold: pay nothing below x_NR, the ceiling above (at x_NR itself the
  rate is p when the ceiling exceeds p, where the surplus sticks until the
  next claim);
* two-band: pay the ceiling on [0, b1] u [b2, inf) and nothing in between.

The value of a candidate profile solves L_{r(x)}(v) = 0 with the piecewise
rate r; when the ceiling exceeds the premium the solve is causal
left-to-right, otherwise the growing mode is matched to c_bar/q at x_max.
Because the operator is linear in the rate, paying is preferred exactly
where v' < 1, so optimal edges sit on v' = 1 crossings, a slope-scale
criterion that stays sharp where value comparisons plateau.  Every winner is
certified against the stationary HJB: max(L_0(v), L_cbar(v)) must vanish
within tolerance on the trust window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import VerificationFailed
from .finite_ratchet import RESIDUAL_VERIFY_REL, VERIFY_FRACTION
from .ide_core import (
    Quadrature,
    ValueCurve,
    XGrid,
    _march_family,
    _march_single,
    _volterra_march,
    operator_residuals,
)
from .model import ValidatedModel

__all__ = ["BandSpec", "optimize_threshold_nr", "optimize_band_nr"]


@dataclass(frozen=True)
class BandSpec:
    """Partition of the surplus axis by payout action.

    no_pay, pay_premium and pay_ceiling are tuples of (start, end) intervals
    (end = inf for the last one); together they cover [0, inf).
    """

    no_pay: tuple
    pay_premium: tuple
    pay_ceiling: tuple

    @classmethod
    def threshold(cls, x_nr, c_bar, p):
        inf = float("inf")
        if c_bar < p:
            return cls(((0.0, x_nr),), (), ((x_nr, inf),))
        if c_bar == p:
            return cls(((0.0, x_nr),), ((x_nr, inf),), ())
        return cls(((0.0, x_nr),), ((x_nr, x_nr),), ((x_nr, inf),))

    @classmethod
    def two_band(cls, b1, b2):
        inf = float("inf")
        if b1 <= 0.0:
            return cls(((0.0, b2),), (), ((b2, inf),))
        return cls(((b1, b2),), (), ((0.0, b1), (b2, inf)))

    @property
    def ceiling_set(self):
        return self.pay_ceiling


def _batched_profiles(model, quad, rate_cells, j_end):
    """Particular/homogeneous pairs for a batch of piecewise-rate profiles.

    rate_cells is (j_end, K) with one payout-rate column per candidate.
    Returns (part, hom) arrays of shape (j_end+1, K).
    """
    K = rate_cells.shape[1]
    n = quad.grid.n
    starts = np.zeros(2 * K, dtype=int)
    anchors = np.tile([0.0, 1.0], K)
    inhom = np.tile([1.0, 0.0], K)
    contexts = np.zeros((n + 1, 2 * K))
    rates = np.repeat(rate_cells, 2, axis=1)
    C = _march_family(
        model,
        quad,
        rates,
        starts=starts,
        anchors=anchors,
        inhom=inhom,
        contexts=contexts,
        j_end=j_end,
        pairs=[(2 * i, 2 * i + 1) for i in range(K)],
    )
    return C[:, ::2], C[:, 1::2]


def _value_for_profile(model, quad, rate_cells):
    """Solve L_{r(x)}(v) = 0 on the whole grid for one payout profile.

    Below the premium everywhere: the family is matched to c_bar/q at x_max.
    A profile whose top piece is at or above the premium anchors causally at
    the point where the rate first reaches p (the surplus sticks there, so
    (q+beta) v = p + beta conv), then marches upward.
    """
    grid = quad.grid
    n = grid.n
    p, q, beta = model.p, model.q, model.beta
    top_rate = float(rate_cells[-1])
    if top_rate < p:
        part, hom = _batched_profiles(model, quad, rate_cells[:, None], n)
        part, hom = part[:, 0], hom[:, 0]
        if abs(hom[n]) < 1e-12:
            raise VerificationFailed("profile value matching is ill-conditioned")
        A = (model.value_ceiling - part[n]) / hom[n]
        return part + A * hom
    jt = int(np.flatnonzero(rate_cells != 0.0)[0])
    # lower rate-0 family up to the switch node, pinned by the sticking point
    part, hom = _batched_profiles(model, quad, np.zeros((jt, 1)), jt)
    part, hom = part[:, 0], hom[:, 0]
    cp = quad.conv_all(np.concatenate((part, np.zeros(n - jt))))
    ch = quad.conv_all(np.concatenate((hom, np.zeros(n - jt))))
    num = p + beta * cp[jt] - (q + beta) * part[jt]
    den = (q + beta) * hom[jt] - beta * ch[jt]
    if abs(den) < 1e-12:
        raise VerificationFailed("threshold point condition is ill-conditioned")
    A = num / den
    v = np.empty(n + 1)
    v[: jt + 1] = part + A * hom
    ctx = np.zeros(n + 1)
    ctx[: jt + 1] = v[: jt + 1]
    if top_rate > p:
        upper = _march_single(model, quad, top_rate, jt, v[jt], n, context=ctx)
    else:
        upper = _volterra_march(model, quad, start=jt, context=ctx, j_end=n)
    v[jt:] = upper[jt:]
    return v


def _verify_nr(values, model, quad, kinks, label):
    """Certify max(L_0, L_cbar)(v) = 0 within tolerance on the trust window."""
    grid = quad.grid
    n = grid.n
    tol = RESIDUAL_VERIFY_REL * max(1.0, model.value_ceiling)
    r0 = operator_residuals(values, 0.0, model, grid, quad=quad, kinks=kinks)
    rc = operator_residuals(values, model.c_bar, model, grid, quad=quad, kinks=kinks)
    lo = 1
    hi = n if model.c_bar > model.p else int(VERIFY_FRACTION * n)
    sup = np.maximum(r0, rc)[lo:hi]
    bad = np.flatnonzero(np.abs(sup) > tol) + lo
    skip = set()
    for k in kinks:
        skip.update((k - 1, k, k + 1))
    bad = np.array([j for j in bad if j not in skip], dtype=int)
    if bad.size:
        worst = float(np.abs(np.maximum(r0, rc)[bad]).max())
        raise VerificationFailed(
            f"{label}: stationary HJB residual out of tolerance at {bad.size} nodes "
            f"(max {worst:.3e})",
            diagnostics={"nodes": bad.tolist()},
        )


def _left_slope(arr, js, h):
    return (3.0 * arr[js] - 4.0 * arr[js - 1] + arr[js - 2]) / (2.0 * h)


def optimize_threshold_nr(model: ValidatedModel, grid: XGrid, verify=False):
    """Best threshold strategy: pay the ceiling above x_NR, nothing below.

    Below the premium the optimal threshold sits on the v'(x_NR) = 1
    indifference crossing; at or above it the value at 0 is maximized
    directly.  Returns (x_NR, ValueCurve).
    """
    quad = Quadrature(grid, model.claims)
    n = grid.n
    h = grid.h
    j_max = n if model.c_bar > model.p else int(VERIFY_FRACTION * n)
    p, q, beta = model.p, model.q, model.beta

    if model.c_bar >= p:
        # the anchoring is causal, so one rate-0 family serves all candidates
        # and the value at 0 is sharply unimodal in the threshold (the atom
        # at x_T makes v' = 1 hold identically there, so slope criteria are
        # uninformative in this regime); march only as far as the scan needs
        cap = min(512, j_max)
        while True:
            part, hom = _batched_profiles(model, quad, np.zeros((cap, 1)), cap)
            part, hom = part[:, 0], hom[:, 0]
            cp = quad.conv_all(np.concatenate((part, np.zeros(n - cap))))
            ch = quad.conv_all(np.concatenate((hom, np.zeros(n - cap))))
            js = np.arange(2, cap - 1)
            num = p + beta * cp[js] - (q + beta) * part[js]
            den = (q + beta) * hom[js] - beta * ch[js]
            with np.errstate(divide="ignore", invalid="ignore"):
                A = np.where(np.abs(den) > 1e-300, num / den, -np.inf)
            jt = int(js[np.argmax(A)])
            if jt < cap - 2 or cap >= j_max:
                break
            cap = min(2 * cap, j_max)
    else:
        jt = _scan_threshold_matched(model, quad, j_max)

    rates = np.zeros(n)
    rates[jt:] = model.c_bar
    values = _value_for_profile(model, quad, rates)
    if verify:
        # the best threshold solves the full HJB only in models where the
        # unconstrained optimum has threshold form; band-optimal models
        # legitimately fail here and get certified through optimize_band_nr
        _verify_nr(values, model, quad, (jt,), "threshold")
    return jt * h, ValueCurve(grid, values)


def _slope_one_crossing(js, slope):
    """Node where the slope crosses 1 from above (waiting stops being better)."""
    above = slope > 1.0
    crossings = np.flatnonzero(above[:-1] & ~above[1:])
    if crossings.size == 0:
        return int(js[0]) if not above[0] else int(js[-1])
    return int(js[int(crossings[0]) + 1])


def _threshold_slope_bracket(model, quad, lo, hi, batch):
    """Slope-at-threshold crossing search over one bracket; returns (lo, hi)."""
    grid = quad.grid
    n = grid.n
    h = grid.h
    cands = np.unique(np.linspace(lo, hi, batch).astype(int))
    rate_cells = np.zeros((n, len(cands)))
    for i, jt in enumerate(cands):
        rate_cells[jt:, i] = model.c_bar
    part, hom = _batched_profiles(model, quad, rate_cells, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        A = (model.value_ceiling - part[n]) / hom[n]
    slopes = np.array(
        [
            _left_slope(part[:, i], np.array([jt]), h)[0]
            + A[i] * _left_slope(hom[:, i], np.array([jt]), h)[0]
            for i, jt in enumerate(cands)
        ]
    )
    above = slopes > 1.0
    cross = np.flatnonzero(above[:-1] & ~above[1:])
    if cross.size == 0:
        edge = int(cands[0]) if not above[0] else int(cands[-1])
        return edge, edge
    return int(cands[cross[0]]), int(cands[cross[0] + 1])


def _scan_threshold_matched(model, quad, j_max, batch=24):
    """Locate the v'(x_T) = 1 crossing in the x_max-matched regime.

    Each candidate threshold changes the global profile, so candidates march
    as one batch.  A coarse-grid pass narrows the bracket first; the fine
    grid then shrinks it to node resolution.
    """
    grid = quad.grid
    coarse_factor = 4
    if grid.n > 4000:
        coarse = Quadrature(XGrid.make(grid.x_max, grid.h * coarse_factor), model.claims)
        lo_c, hi_c = 2, int(j_max / coarse_factor) - 2
        while hi_c - lo_c > 1:
            lo_c, hi_c = _threshold_slope_bracket(model, coarse, lo_c, hi_c, batch)
            if lo_c == hi_c:
                break
        lo = max(2, (lo_c - 2) * coarse_factor)
        hi = min(j_max - 2, (hi_c + 2) * coarse_factor)
    else:
        lo, hi = 2, j_max - 2
    while hi - lo > 1:
        lo, hi = _threshold_slope_bracket(model, quad, lo, hi, batch)
        if lo == hi:
            return lo
    return hi


def optimize_band_nr(model: ValidatedModel, grid: XGrid):
    """Best two-band strategy: pay the ceiling on [0, b1] u [b2, inf).

    Policy iteration on the bang-bang rule: paying is optimal where v' < 1,
    so each pass re-solves the current band's value and moves the edges to
    the v' = 1 crossings; the search degenerates to the threshold solution
    when b1 = 0 wins.  Returns (BandSpec, ValueCurve).
    """
    quad = Quadrature(grid, model.claims)
    n = grid.n
    h = grid.h
    x_nr, curve = optimize_threshold_nr(model, grid)
    if model.c_bar >= model.p:
        _verify_nr(curve.values, model, quad, (grid.index_of(x_nr),), "threshold")
        # paying above the premium rate near 0 forces immediate ruin, so the
        # leading band is never profitable in this regime
        return BandSpec.threshold(x_nr, model.c_bar, model.p), curve
    j1, j2 = 0, grid.index_of(x_nr)
    values = curve.values
    j_verify = int(VERIFY_FRACTION * n)
    seen = set()
    for _ in range(40):
        js = np.arange(2, j_verify)
        dv = _left_slope(values, js, h)
        pay = dv < 1.0
        if pay[0]:
            flip = np.flatnonzero(~pay)
            new_j1 = int(js[flip[0]] - 1) if flip.size else 0
        else:
            new_j1 = 0
        after = js > max(new_j1 + 1, 2)
        cross = np.flatnonzero(~pay[:-1] & pay[1:] & after[:-1])
        new_j2 = int(js[int(cross[0]) + 1]) if cross.size else j2
        if new_j1 >= new_j2 - 2:
            new_j1 = 0
        rates = np.zeros(n)
        rates[:new_j1] = model.c_bar
        rates[new_j2:] = model.c_bar
        values = _value_for_profile(model, quad, rates)
        if (new_j1, new_j2) == (j1, j2) or (new_j1, new_j2) in seen:
            j1, j2 = new_j1, new_j2
            break
        seen.add((new_j1, new_j2))
        j1, j2 = new_j1, new_j2
    kinks = tuple(j for j in (j1, j2) if 0 < j < n)
    _verify_nr(values, model, quad, kinks, "band")
    return BandSpec.two_band(j1 * h, j2 * h), ValueCurve(grid, values)
