"""Maximum-quantile decision values.

The optimal decision value for testing ``h @ x = mu`` at level ``alpha`` is
the largest ``(1 - alpha)`` quantile of the null statistic over the slice,

    MQ_mu = sup_{x in X, h@x = mu} Q_{F_x}(1 - alpha),

and its constant counterpart takes the sup over all of ``X``.  Equivalently,
``q`` is valid exactly when the chance constraint ``P_x(lambda <= q) >=
1 - alpha`` holds for every null ``x`` (see :func:`cco_certify`).  A joint
formulation that optimizes the decision values of every ``mu`` in one
chance-constrained program is possible but is not provided; each slice is
searched separately here.

The quantile is a noisy black-box function of ``x``.  It is estimated on a
fixed noise matrix shared by every candidate (common random numbers), which
makes the estimate a deterministic function of ``x``, and it is maximized
with a multi-start pattern search inside a bounded search box.  For
unbounded ``X`` the result is therefore a lower estimate of the sup.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _random
from .llr import LlrStatistic
from .nulldist import null_draws
from .solver import project_box_slice
from .stats import chi2_quantile, clopper_pearson, order_stat_ci_indices

__all__ = [
    "DecisionRule",
    "MaxQuantileResult",
    "PerMuResult",
    "CcoResult",
    "max_quantile",
    "max_quantile_per_mu",
    "cco_certify",
    "quantile_with_ci",
]

RULE_KINDS = ("scalar", "per_mu", "chi2_one", "chi2_m", "analytic")


@dataclass(frozen=True, eq=False)
class DecisionRule:
    """Decision value ``q`` for the test of ``h @ x = mu``.

    Kinds
    -----
    scalar
        One value ``q`` for every ``mu``.
    per_mu
        Values on a ``mu`` grid.  Between grid points the larger of the
        two neighbours applies; outside the grid the maximum of all values.
    chi2_one
        ``Q_{chi2_1}(level)``, the one-at-a-time cutoff.
    chi2_m
        ``Q_{chi2_m}(level)`` applied to the raw residual ``||y - K x||^2``
        rather than to the statistic; interval code subtracts ``s^2(y)``.
    analytic
        A callable ``mu -> q``.
    """

    kind: str
    level: float
    q: float | None = None
    mu_grid: np.ndarray | None = None
    q_values: np.ndarray | None = None
    func: Callable | None = field(default=None, repr=False)
    provenance: str = ""
    seed: int | None = None
    df: int = 1

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if not 0 < self.level < 1:
            raise ValueError("level must lie strictly between 0 and 1")
        if self.kind in ("scalar", "chi2_one", "chi2_m"):
            if self.q is None or not (self.q >= 0):
                raise ValueError("a scalar rule needs q >= 0")
            object.__setattr__(self, "q", float(self.q))
        elif self.kind == "per_mu":
            g = np.asarray(self.mu_grid, dtype=float).ravel()
            v = np.asarray(self.q_values, dtype=float).ravel()
            if g.size == 0 or g.shape != v.shape:
                raise ValueError("mu_grid and q_values must be nonempty and of equal length")
            if np.any(v < 0) or np.any(np.isnan(v)):
                raise ValueError("q values must be nonnegative")
            order = np.argsort(g)
            g, v = g[order], v[order]
            if np.any(np.diff(g) <= 0):
                raise ValueError("mu_grid must not contain duplicates")
            g.setflags(write=False)
            v.setflags(write=False)
            object.__setattr__(self, "mu_grid", g)
            object.__setattr__(self, "q_values", v)
        elif self.func is None:
            raise ValueError("an analytic rule needs a callable")

    # constructors -----------------------------------------------------
    @classmethod
    def scalar(cls, q: float, level: float, provenance: str = "", seed=None) -> "DecisionRule":
        return cls(kind="scalar", level=level, q=q, provenance=provenance, seed=seed)

    @classmethod
    def per_mu(cls, mu_grid, q_values, level: float, provenance: str = "", seed=None) -> "DecisionRule":
        return cls(kind="per_mu", level=level, mu_grid=mu_grid, q_values=q_values,
                   provenance=provenance, seed=seed)

    @classmethod
    def chi2_one(cls, level: float) -> "DecisionRule":
        return cls(kind="chi2_one", level=level, q=chi2_quantile(level, 1),
                   provenance="chi-square quantile with 1 degree of freedom")

    @classmethod
    def chi2_m(cls, level: float, m: int) -> "DecisionRule":
        return cls(kind="chi2_m", level=level, q=chi2_quantile(level, m), df=int(m),
                   provenance=f"chi-square quantile with {m} degrees of freedom")

    @classmethod
    def analytic(cls, func: Callable, level: float, provenance: str = "") -> "DecisionRule":
        return cls(kind="analytic", level=level, func=func, provenance=provenance)

    # evaluation -------------------------------------------------------
    @property
    def is_constant(self) -> bool:
        return self.kind in ("scalar", "chi2_one", "chi2_m")

    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        """Edges ``a_0 < ... < a_K`` and values for the ``K + 1`` closed cells.

        Cell 0 is ``(-inf, a_0]``, cell ``k`` is ``[a_{k-1}, a_k]`` and cell
        ``K`` is ``[a_{K-1}, inf)``.  A grid point belongs to both adjacent
        cells, so it receives the larger value.
        """
        if self.kind != "per_mu":
            raise TypeError("cells() is only defined for per-mu rules")
        v = self.q_values
        top = float(np.max(v))
        inner = np.maximum(v[:-1], v[1:])
        return self.mu_grid.copy(), np.concatenate([[top], inner, [top]])

    def __call__(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.is_constant:
            out = np.full(mu.shape, self.q)
        elif self.kind == "analytic":
            out = np.asarray(self.func(mu), dtype=float)
        else:
            edges, vals = self.cells()
            # cell index of interior points; grid points take the max of both sides
            left = np.searchsorted(edges, mu, side="left")
            right = np.searchsorted(edges, mu, side="right")
            out = np.maximum(vals[left], vals[right])
        return float(out) if out.ndim == 0 else out

    # serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "level": self.level}
        if self.is_constant:
            d["q"] = self.q
            if self.kind == "chi2_m":
                d["df"] = self.df
        elif self.kind == "per_mu":
            d["mu_grid"] = [float(v) for v in self.mu_grid]
            d["q_values"] = [float(v) for v in self.q_values]
        d["provenance"] = self.provenance
        d["seed"] = self.seed
        return d

    def to_json(self) -> str:
        if self.kind == "analytic":
            raise TypeError("analytic rules are not serializable")
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionRule":
        for key in ("kind", "level"):
            if key not in d:
                raise ValueError(f"missing key {key!r} in decision rule")
        kind = d["kind"]
        common = dict(level=float(d["level"]), provenance=d.get("provenance", ""), seed=d.get("seed"))
        if kind in ("scalar", "chi2_one", "chi2_m"):
            if "q" not in d:
                raise ValueError("missing key 'q' in decision rule")
            return cls(kind=kind, q=float(d["q"]), df=int(d.get("df", 1)), **common)
        if kind == "per_mu":
            for key in ("mu_grid", "q_values"):
                if key not in d:
                    raise ValueError(f"missing key {key!r} in decision rule")
            return cls(kind=kind, mu_grid=d["mu_grid"], q_values=d["q_values"], **common)
        raise ValueError(f"key 'kind': cannot deserialize rule kind {kind!r}")

    @classmethod
    def from_json(cls, text: str) -> "DecisionRule":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# quantile objective

def quantile_with_ci(draws: np.ndarray, level: float, conf: float = 0.95) -> tuple[float, float, float]:
    """Order-statistic quantile estimate with its distribution-free CI.

    Uses partial sorting; matches :func:`stats.empirical_quantile` and
    :func:`stats.quantile_order_stat_ci`.
    """
    n = draws.size
    k = min(max(math.ceil(level * n - 1e-9), 1), n)
    lo_i, hi_i = order_stat_ci_indices(n, level, conf)
    idx = sorted({k - 1, lo_i - 1, hi_i - 1})
    part = np.partition(draws, idx)
    return float(part[k - 1]), float(part[lo_i - 1]), float(part[hi_i - 1])


@dataclass
class _Objective:
    stat: LlrStatistic
    eps: np.ndarray
    level: float
    conf: float
    mu: float | None = None
    history: list = field(default_factory=list)
    _memo: dict = field(default_factory=dict)

    def __call__(self, x: np.ndarray) -> float:
        key = tuple(np.round(x, 15))
        if key in self._memo:
            return self._memo[key]
        inst = self.stat.inst
        if self.mu is None:
            draws = null_draws(self.stat, x, self.eps)
        else:
            Y = inst.forward_mean(x) + self.eps
            draws = self.stat.evaluate_batch(self.mu, Y)
        q, lo, hi = quantile_with_ci(draws, self.level, self.conf)
        self._memo[key] = q
        self.history.append((np.array(x, dtype=float), q, lo, hi))
        return q

    def ci(self, x: np.ndarray) -> tuple[float, float]:
        key = tuple(np.round(x, 15))
        self(x)
        for xx, q, lo, hi in reversed(self.history):
            if tuple(np.round(xx, 15)) == key:
                return lo, hi
        raise KeyError(key)


def _pattern_search(f, x0, lo, hi, step, min_step, max_evals):
    """Compass search maximizing ``f`` over ``[lo, hi]``."""
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    fx = f(x)
    evals = 1
    step = np.array(step, dtype=float)
    active = step > 0
    while evals < max_evals and np.any(step[active] > min_step[active]):
        improved = False
        for i in np.flatnonzero(active):
            for sgn in (1.0, -1.0):
                cand = x.copy()
                cand[i] = min(max(cand[i] + sgn * step[i], lo[i]), hi[i])
                if cand[i] == x[i]:
                    continue
                fc = f(cand)
                evals += 1
                if fc > fx:
                    x, fx, improved = cand, fc, True
                    break
                if evals >= max_evals:
                    break
            if evals >= max_evals:
                break
        if not improved:
            step = step * 0.5
    return x, fx, step, evals


def _multistart(f, lo, hi, starts, budget, min_frac=1e-3):
    """Shared driver: restarts from ``starts`` then refine the incumbent."""
    width = hi - lo
    min_step = min_frac * width
    n_starts = len(starts)
    per = max(1, budget // max(n_starts, 1))
    best_x, best_f, best_step = None, -math.inf, None
    used = 0
    for x0 in starts:
        x, fx, st, ev = _pattern_search(f, x0, lo, hi, 0.25 * width, min_step, per)
        used += ev
        if fx > best_f:
            best_x, best_f, best_step = x, fx, st
    if best_x is not None and np.any(width > 0):
        x, fx, _, ev = _pattern_search(f, best_x, lo, hi, np.maximum(best_step, 0), min_step, budget)
        used += ev
        if fx >= best_f:
            best_x, best_f = x, fx
    return best_x, best_f, used


def _restarts(budget: int) -> int:
    return max(8, budget // 25)


def _start_points(lo, hi, count, rng):
    """Box center, then points on the lower faces, then uniform draws.

    Null quantiles tend to peak where constraints bind, so every subset of
    coordinates pinned at its lower bound (others at the center) is tried
    first when ``p <= 4``.
    """
    p = lo.size
    center = 0.5 * (lo + hi)
    pts = [center]
    if p <= 4:
        subsets = sorted(
            (s for r in range(1, p + 1) for s in itertools.combinations(range(p), r)),
            key=lambda s: -len(s),
        )
        for s in subsets:
            x = center.copy()
            x[list(s)] = lo[list(s)]
            pts.append(x)
    pts = pts[:count]
    while len(pts) < count:
        pts.append(rng.uniform(lo, hi))
    return pts


@dataclass(frozen=True, eq=False)
class MaxQuantileResult:
    """Outcome of a maximum-quantile search.

    ``q`` is the point estimate at ``argmax``; ``ci`` its order-statistic
    confidence interval.  :meth:`rule` promotes the upper CI end.
    """

    q: float
    argmax: np.ndarray
    ci: tuple[float, float]
    level: float
    n_evals: int
    n_per_eval: int
    seed: int
    conf: float
    evaluations: list = field(repr=False, default_factory=list)

    def rule(self, conservative: bool = True) -> DecisionRule:
        q = self.ci[1] if conservative else self.q
        prov = (f"max quantile over search box, argmax={list(map(float, self.argmax))}, "
                f"n_per_eval={self.n_per_eval}, evals={self.n_evals}, "
                f"{'upper CI end' if conservative else 'point estimate'}")
        return DecisionRule.scalar(q, self.level, prov, self.seed)


def _check_box(stat: LlrStatistic, lower, upper):
    p = stat.inst.p
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (p,)).copy()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (p,)).copy()
    if np.any(lo > hi):
        raise ValueError("empty search box")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("the search box must be bounded")
    cs = stat.inst.constraints
    if cs.is_box:
        cl, cu = cs.bounds()
        if np.any(lo < cl - 1e-12) or np.any(hi > cu + 1e-12):
            raise ValueError("search box must lie inside the constraint set")
    elif p <= 12:
        for corner in np.array(np.meshgrid(*zip(lo, hi))).reshape(p, -1).T:
            if not cs.contains(corner):
                raise ValueError("search box must lie inside the constraint set")
    return lo, hi


def max_quantile(stat: LlrStatistic, level: float, lower, upper, budget: int = 200,
                 n_per_eval: int = 10_000, seed: int = 0, conf: float = 0.95,
                 threads: int | None = None) -> MaxQuantileResult:
    """Largest ``level`` quantile of ``F_x`` found over a box.

    Parameters
    ----------
    stat : LlrStatistic
    level : float
        ``1 - alpha``.
    lower, upper : array_like
        Bounded search box inside ``X``.
    budget : int
        Evaluations shared by the ``max(8, budget // 25)`` restarts; the
        final refinement of the incumbent may use up to ``budget`` more.
    n_per_eval : int
        Noise draws per evaluation, shared by all candidates.
    seed : int
        Seeds both the noise matrix and the random restarts.
    conf : float
        Confidence of the reported quantile intervals.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    lo, hi = _check_box(stat, lower, upper)
    noise_seed, start_seed = _random.spawn(seed, 2)
    eps = _random.normal_matrix(noise_seed, n_per_eval, stat.inst.m, threads)
    f = _Objective(stat, eps, level, conf)
    rng = _random.generator(start_seed)
    starts = _start_points(lo, hi, _restarts(budget), rng)
    if np.all(hi == lo):
        x, fx, used = lo, f(lo), 1
    else:
        x, fx, used = _multistart(f, lo, hi, starts, budget)
    ci = f.ci(x)
    return MaxQuantileResult(q=fx, argmax=np.array(x), ci=ci, level=level, n_evals=len(f.history),
                             n_per_eval=n_per_eval, seed=int(seed), conf=conf,
                             evaluations=f.history)


@dataclass(frozen=True, eq=False)
class PerMuResult:
    rule: DecisionRule
    mu: np.ndarray
    q: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    argmax: np.ndarray
    dropped: list
    n_evals: int


def max_quantile_per_mu(stat: LlrStatistic, level: float, mu_grid, lower, upper,
                        budget: int = 100, n_per_eval: int = 10_000, seed: int = 0,
                        conf: float = 0.95, threads: int | None = None) -> PerMuResult:
    """Largest ``level`` quantile over each slice ``h @ x = mu`` of the box.

    The slice is parameterized by the coordinates other than the one with
    the largest ``|h_j|``, which is solved from the constraint.  Grid
    values whose slice misses the box are dropped and listed.  The
    returned rule stores upper CI ends.
    """
    lo, hi = _check_box(stat, lower, upper)
    inst = stat.inst
    h = inst.h
    j = int(np.argmax(np.abs(h)))
    free = [i for i in range(inst.p) if i != j]
    noise_seed, start_seed = _random.spawn(seed, 2)
    eps = _random.normal_matrix(noise_seed, n_per_eval, inst.m, threads)
    rng = _random.generator(start_seed)
    mus, qs, los, his, args, dropped = [], [], [], [], [], []
    total = 0
    n_starts = _restarts(budget)
    for mu in np.asarray(mu_grid, dtype=float).ravel():
        raw = np.vstack(_start_points(lo, hi, n_starts, rng))
        S, ok = project_box_slice(raw, h, mu, lo, hi)
        if not ok[0]:
            dropped.append(float(mu))
            continue
        f = _Objective(stat, eps, level, conf, mu=float(mu))

        def full(z, mu=mu):
            x = np.empty(inst.p)
            x[free] = z
            x[j] = (mu - h[free] @ z) / h[j] if free else mu / h[j]
            return x

        def g(z, f=f, full=full):
            x = full(z)
            tol = 1e-9 * (1.0 + abs(x[j]))
            if x[j] < lo[j] - tol or x[j] > hi[j] + tol:
                return -math.inf
            x[j] = min(max(x[j], lo[j]), hi[j])
            return f(x)

        if free:
            zl, zh = lo[free], hi[free]
            z, gz, _ = _multistart(g, zl, zh, [s[free] for s in S], budget)
        else:
            z, gz = np.zeros(0), g(np.zeros(0))
        x = full(z)
        x[j] = min(max(x[j], lo[j]), hi[j])
        c_lo, c_hi = f.ci(x)
        total += len(f.history)
        mus.append(float(mu))
        qs.append(gz)
        los.append(c_lo)
        his.append(c_hi)
        args.append(x)
    if not mus:
        raise ValueError("no grid value of mu has a feasible slice in the search box")
    rule = DecisionRule.per_mu(
        mus, his, level,
        provenance=(f"per-mu max quantile, n_per_eval={n_per_eval}, budget={budget}, "
                    "upper CI ends"),
        seed=int(seed),
    )
    return PerMuResult(rule=rule, mu=np.array(mus), q=np.array(qs), ci_lo=np.array(los),
                       ci_hi=np.array(his), argmax=np.array(args), dropped=dropped, n_evals=total)


@dataclass(frozen=True)
class CcoResult:
    """Monte Carlo check of the chance constraint ``P_x(lambda <= q) <= level``."""

    p_hat: float
    sigma: float
    cp_lo: float
    cp_hi: float
    count: int
    n: int
    level: float

    @property
    def feasible(self) -> bool:
        return self.p_hat <= self.level

    @property
    def consistent_with_boundary(self) -> bool:
        """The CI for ``P(lambda <= q)`` contains ``level``."""
        return self.cp_lo <= self.level <= self.cp_hi


def cco_certify(stat: LlrStatistic, x, q: float, level: float, n: int, seed: int,
                threads: int | None = None) -> CcoResult:
    """Estimate ``P_x(lambda <= q)`` with a Clopper-Pearson interval.

    ``q`` is a valid decision value at ``x`` when this probability reaches
    ``level``; the chance-constrained reading of the max-quantile problem
    calls ``x`` feasible when the probability is at most ``level``.
    """
    x = np.asarray(x, dtype=float)
    if not stat.inst.constraints.contains(x):
        raise ValueError("x lies outside the constraint set")
    counts = _random.map_normal_chunks(
        lambda e: int(np.count_nonzero(null_draws(stat, x, e) <= q)), seed, n, stat.inst.m, threads)
    k = int(sum(counts))
    p_hat = k / n
    lo, hi = clopper_pearson(k, n, 0.05)
    return CcoResult(p_hat=p_hat, sigma=math.sqrt(max(p_hat * (1 - p_hat), 1e-300) / n),
                     cp_lo=lo, cp_hi=hi, count=k, n=int(n), level=level)
