"""Confidence intervals by inverting the constrained LLR test.

Every method reduces to the set ``{mu : g(mu) <= q(mu)}`` with
``g(mu) = slice_min(mu) - s^2(y)``.  ``g`` is convex in ``mu`` and vanishes at
``mu_hat = h @ x_hat``, so each side is found by an outward search from
``mu_hat``: a check of the functional-range bound, geometric bracket
expansion, then bisection.  The four methods differ only in ``q``:

==========  ==========================================================
SSB         ``Q_{chi2_m}(1 - alpha) - s^2(y)``; empty when negative
OSB         ``Q_{chi2_1}(1 - alpha)`` (not valid in general)
MQ          scalar maximum quantile over ``X``
MQmu        per-``mu`` maximum quantile
==========  ==========================================================

Per-``mu`` rules are piecewise constant, and on each cell the accepted
``mu`` form a prefix that starts at the end nearest to ``mu_hat``.  The
reported endpoints are the extreme accepted values, so the interval is
the hull of the accepted set.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .llr import LlrStatistic
from .maxquantile import DecisionRule
from .model import ProblemInstance
from .stats import chi2_quantile, normal_upper_cutoff

__all__ = [
    "IntervalResult",
    "BatchIntervals",
    "interval_functional_space",
    "intervals_batch",
    "interval_ssb",
    "interval_osb",
    "interval_mq",
    "interval_mqmu",
    "interval_unconstrained_closed_form",
    "rule_for_method",
    "MAX_DOUBLINGS",
]

MAX_DOUBLINGS = 60
REL_TOL = 1e-8


def _encode(v: float):
    if v == math.inf:
        return "inf"
    if v == -math.inf:
        return "-inf"
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


@dataclass(frozen=True)
class IntervalResult:
    """One confidence interval.

    ``lower`` and ``upper`` are NaN when ``empty``; either may be infinite
    when ``phi`` is unbounded over the accepted set.
    """

    method: str
    alpha: float
    lower: float
    upper: float
    empty: bool
    q_used: object
    s2: float
    n_solves: int
    mu_hat: float = math.nan

    @property
    def length(self) -> float:
        return 0.0 if self.empty else self.upper - self.lower

    def contains(self, mu: float) -> bool:
        return (not self.empty) and self.lower <= mu <= self.upper

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("mu_hat")
        for key in ("lower", "upper", "s2"):
            d[key] = _encode(d[key])
        if self.empty:
            d["lower"] = d["upper"] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True, eq=False)
class BatchIntervals:
    """Intervals for many observations at once."""

    lower: np.ndarray
    upper: np.ndarray
    empty: np.ndarray
    s2: np.ndarray
    mu_hat: np.ndarray
    n_solves: int

    def covers(self, mu: float) -> np.ndarray:
        return ~self.empty & (self.lower <= mu) & (mu <= self.upper)

    def lengths(self) -> np.ndarray:
        return np.where(self.empty, 0.0, self.upper - self.lower)


class _Counter:
    def __init__(self):
        self.n = 0


def _as_stat(obj) -> LlrStatistic:
    if isinstance(obj, LlrStatistic):
        return obj
    if isinstance(obj, ProblemInstance):
        return LlrStatistic(obj)
    raise TypeError("expected a ProblemInstance or LlrStatistic")


def _search(g, qfun, start, stop, direction, tol, counter):
    """Outermost ``t`` between ``start`` and ``stop`` with ``g(t) <= q(t)``.

    Assumes ``g(start) <= q(start)``.  ``stop`` may be infinite; in that
    case the bracket grows from step 1 by doubling, and a side that never
    crosses within :data:`MAX_DOUBLINGS` doublings is reported infinite.
    Returns the outer end of the final bracket.

    ``g(idx, t)`` and ``qfun(idx, t)`` evaluate rows ``idx`` at points ``t``.
    """
    n = start.size
    out = np.empty(n)
    fin = np.isfinite(stop)
    # 1. the range bound itself
    inner = start.copy()
    outer = stop.copy()
    done = np.zeros(n, dtype=bool)
    idx = np.flatnonzero(fin & (stop != start))
    out[fin & (stop == start)] = stop[fin & (stop == start)]
    done[fin & (stop == start)] = True
    if idx.size:
        ok = g(idx, stop[idx]) <= qfun(idx, stop[idx])
        counter.n += idx.size
        out[idx[ok]] = stop[idx[ok]]
        done[idx[ok]] = True
    # 2. expansion: inner stays accepted, outer becomes rejected
    todo = np.flatnonzero(~done)
    step = np.ones(n)
    grow = todo.copy()
    bracketed = np.zeros(n, dtype=bool)
    for _ in range(MAX_DOUBLINGS + 1):
        if grow.size == 0:
            break
        t = inner[grow] + direction * step[grow]
        lim = stop[grow]
        past = (t - lim) * direction >= 0
        t = np.where(past, lim, t)
        rej = np.ones(grow.size, dtype=bool)
        ev = ~past  # points at the bound are known to be rejected
        if np.any(ev):
            rej[ev] = g(grow[ev], t[ev]) > qfun(grow[ev], t[ev])
            counter.n += int(np.count_nonzero(ev))
        acc = ~rej
        inner[grow[acc]] = t[acc]
        outer[grow[rej]] = t[rej]
        bracketed[grow[rej]] = True
        step[grow] *= 2.0
        grow = grow[acc]
    out[grow] = direction * math.inf
    # 3. bisection
    bis = np.flatnonzero(~done & bracketed)
    tol_row = tol[bis] if np.ndim(tol) else np.full(bis.size, tol)
    while bis.size:
        width = np.abs(outer[bis] - inner[bis])
        fin_rows = width > tol_row
        if not np.any(fin_rows):
            break
        sub = bis[fin_rows]
        mid = 0.5 * (inner[sub] + outer[sub])
        acc = g(sub, mid) <= qfun(sub, mid)
        counter.n += sub.size
        inner[sub[acc]] = mid[acc]
        outer[sub[~acc]] = mid[~acc]
        bis, tol_row = sub, tol_row[fin_rows]
    rows = np.flatnonzero(~done & bracketed)
    out[rows] = outer[rows]
    return out


def _engine(stat: LlrStatistic, Y: np.ndarray, rule: DecisionRule) -> BatchIntervals:
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = Y.shape[0]
    counter = _Counter()
    s2, mu_hat = stat.base(Y)
    counter.n += n
    lo_r, hi_r = stat.functional_range
    slack = 1e-12 * (1.0 + s2)
    tol = REL_TOL * (1.0 + np.abs(mu_hat))

    def g(idx, t):
        return stat.slice_objective(t, Y[idx]) - s2[idx] - slack[idx]

    lower = np.full(n, np.nan)
    upper = np.full(n, np.nan)
    empty = np.zeros(n, dtype=bool)

    if rule.kind == "analytic":
        def qfun(idx, t):
            return np.asarray(rule(t), dtype=float)

        q_hat = qfun(np.arange(n), mu_hat)
        empty = q_hat < 0
        live = np.flatnonzero(~empty)
        sub = lambda idx, t: g(live[idx], t)  # noqa: E731
        subq = lambda idx, t: qfun(live[idx], t)  # noqa: E731
        upper[live] = _search(sub, subq, mu_hat[live], np.full(live.size, hi_r), 1.0, tol[live], counter)
        lower[live] = _search(sub, subq, mu_hat[live], np.full(live.size, lo_r), -1.0, tol[live], counter)
        return BatchIntervals(lower, upper, empty, s2, mu_hat, counter.n)

    if rule.is_constant:
        edges = np.zeros(0)
        q_row = np.full(n, rule.q) - (s2 if rule.kind == "chi2_m" else 0.0)
        vals = q_row[:, None]
    else:
        edges, cell_vals = rule.cells()
        vals = np.broadcast_to(cell_vals, (n, cell_vals.size))
    K = edges.size
    empty = np.min(vals, axis=1) < 0 if K == 0 else np.zeros(n, dtype=bool)
    live = np.flatnonzero(~empty)
    if live.size == 0:
        return BatchIntervals(lower, upper, empty, s2, mu_hat, counter.n)
    Yl, mh, v = live, mu_hat[live], vals[live]
    # g at every grid edge
    G = np.empty((live.size, K))
    for k in range(K):
        G[:, k] = g(Yl, np.full(live.size, edges[k]))
        counter.n += live.size
    left = np.concatenate([[-math.inf], edges])   # L_c
    right = np.concatenate([edges, [math.inf]])   # R_c
    rows = np.arange(live.size)

    for direction, bound in ((1.0, hi_r), (-1.0, lo_r)):
        if direction > 0:
            # cells reaching to the right of mu_hat; accepted prefix starts at max(L_c, mu_hat)
            reach = right[None, :] >= mh[:, None]
            start_is_edge = left[None, :] > mh[:, None]
            g_start = np.zeros((live.size, K + 1))
            if K:
                g_start[:, 1:] = np.where(start_is_edge[:, 1:], G, 0.0)
            beyond = left[None, :] > bound
        else:
            reach = left[None, :] <= mh[:, None]
            start_is_edge = right[None, :] < mh[:, None]
            g_start = np.zeros((live.size, K + 1))
            if K:
                g_start[:, :-1] = np.where(start_is_edge[:, :-1], G, 0.0)
            beyond = right[None, :] < bound
        ok = reach & ~beyond & (g_start <= v)
        if direction > 0:
            c = K - np.argmax(ok[:, ::-1], axis=1)
        else:
            c = np.argmax(ok, axis=1)
        # the cell holding mu_hat always qualifies since g(mu_hat) = 0 <= q
        if direction > 0:
            start = np.maximum(left[c], mh)
            stop = np.minimum(right[c], bound)
        else:
            start = np.minimum(right[c], mh)
            stop = np.maximum(left[c], bound)
        qc = v[rows, c]
        res = _search(lambda idx, t: g(Yl[idx], t), lambda idx, t: qc[idx],
                      start, stop, direction, tol[live], counter)
        if direction > 0:
            upper[live] = res
        else:
            lower[live] = res
    return BatchIntervals(lower, upper, empty, s2, mu_hat, counter.n)


def intervals_batch(stat, Y, rule: DecisionRule) -> BatchIntervals:
    """Engine over rows of observations."""
    return _engine(_as_stat(stat), Y, rule)


def _q_summary(rule: DecisionRule, s2: float):
    if rule.kind == "chi2_m":
        return rule.q - s2
    if rule.is_constant:
        return rule.q
    if rule.kind == "per_mu":
        return {"kind": "per_mu", "min": float(np.min(rule.q_values)),
                "max": float(np.max(rule.q_values)), "n_grid": int(rule.mu_grid.size)}
    return {"kind": "analytic", "provenance": rule.provenance}


def interval_functional_space(stat, y, rule: DecisionRule, method: str = "custom",
                              alpha: float | None = None) -> IntervalResult:
    """Interval ``{mu : lambda(mu, y) <= q(mu)}`` for one observation."""
    stat = _as_stat(stat)
    y = np.asarray(y, dtype=float).ravel()
    b = _engine(stat, y[None, :], rule)
    alpha = 1.0 - rule.level if alpha is None else alpha
    return IntervalResult(
        method=method, alpha=float(alpha), lower=float(b.lower[0]), upper=float(b.upper[0]),
        empty=bool(b.empty[0]), q_used=_q_summary(rule, float(b.s2[0])), s2=float(b.s2[0]),
        n_solves=int(b.n_solves), mu_hat=float(b.mu_hat[0]),
    )


def rule_for_method(method: str, alpha: float, m: int = 1) -> DecisionRule:
    """Rules that need no simulation: ``ssb`` and ``osb``."""
    method = method.lower()
    if method == "ssb":
        return DecisionRule.chi2_m(1.0 - alpha, m)
    if method == "osb":
        return DecisionRule.chi2_one(1.0 - alpha)
    raise ValueError(f"method {method!r} needs a precomputed decision rule")


def interval_ssb(stat, y, alpha: float) -> IntervalResult:
    """Simultaneous strict bounds: project ``{x in X : ||y - K x||^2 <= Q_{chi2_m}(1 - alpha)}``."""
    stat = _as_stat(stat)
    return interval_functional_space(stat, y, rule_for_method("ssb", alpha, stat.inst.m), "ssb", alpha)


def interval_osb(stat, y, alpha: float) -> IntervalResult:
    """One-at-a-time strict bounds with ``psi^2 = z_{alpha/2}^2 + s^2(y)``.

    These intervals do not have guaranteed coverage for every problem.
    """
    return interval_functional_space(stat, y, rule_for_method("osb", alpha), "osb", alpha)


def _check_level(rule: DecisionRule, alpha: float):
    if abs(rule.level - (1.0 - alpha)) > 1e-12:
        raise ValueError(f"rule level {rule.level} does not match 1 - alpha = {1 - alpha}")


def interval_mq(stat, y, alpha: float, rule: DecisionRule) -> IntervalResult:
    _check_level(rule, alpha)
    if not rule.is_constant:
        raise ValueError("interval_mq expects a scalar rule")
    return interval_functional_space(stat, y, rule, "mq", alpha)


def interval_mqmu(stat, y, alpha: float, rule: DecisionRule) -> IntervalResult:
    _check_level(rule, alpha)
    return interval_functional_space(stat, y, rule, "mqmu", alpha)


def interval_unconstrained_closed_form(inst: ProblemInstance, y, alpha: float) -> IntervalResult:
    """``h @ x_ls +/- z_{alpha/2} sqrt(h^T (K^T K)^{-1} h)``, ignoring constraints."""
    K = inst.K
    if np.linalg.matrix_rank(K) < inst.p:
        raise np.linalg.LinAlgError("K must have full column rank")
    y = np.asarray(y, dtype=float).ravel()
    x_ls = np.linalg.lstsq(K, y, rcond=None)[0]
    w = np.linalg.solve(K.T @ K, inst.h)
    half = normal_upper_cutoff(alpha / 2.0) * math.sqrt(float(inst.h @ w))
    center = float(inst.h @ x_ls)
    s2 = float(np.sum((y - K @ x_ls) ** 2))
    return IntervalResult(method="closed_form", alpha=alpha, lower=center - half, upper=center + half,
                          empty=False, q_used=chi2_quantile(1.0 - alpha, 1), s2=s2, n_solves=0,
                          mu_hat=center)
