"""Scenario presets and Monte Carlo harnesses.

Coverage studies draw observations at each true parameter, build every
requested interval on the same draws, and report the coverage with a
Clopper-Pearson interval and the mean length with its standard error.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _random
from .intervals import intervals_batch, rule_for_method
from .llr import LlrStatistic, evaluate_2d_counterexample, evaluate_3d_counterexample
from .maxquantile import DecisionRule, max_quantile, max_quantile_per_mu, quantile_with_ci
from .model import (
    ProblemInstance,
    box_model,
    dimension_family,
    one_dim_model,
    three_dim_counterexample,
    two_dim_counterexample,
)
from .nulldist import null_draws, quantile_1d_constrained
from .stats import chi2_quantile, clopper_pearson, normal_cdf, normal_pdf

__all__ = [
    "Scenario",
    "CoverageRow",
    "CoverageReport",
    "CounterexampleReport",
    "CouplingReport",
    "DivergenceReport",
    "QuantileCurve",
    "PRESETS",
    "preset",
    "build_rules",
    "run_coverage",
    "run_counterexample_mean",
    "run_coupling_check",
    "run_dimension_divergence",
    "run_quantile_curve",
    "E_SLICE_TARGET",
    "E_ORTHANT_TARGET",
]

METHODS = ("ssb", "osb", "mq", "mqmu")

E_SLICE_TARGET = 13.0 / 6.0
E_ORTHANT_TARGET = 1.0 + 2.0 * normal_cdf(-1.0) - normal_pdf(-1.0)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def _truth_label(x) -> str:
    return ";".join(_fmt(v) for v in np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class Scenario:
    """A coverage study: model, true parameters, levels and methods.

    ``search_lower``/``search_upper`` bound the max-quantile searches and
    ``mu_grid`` carries the per-``mu`` rule.  With ``analytic_mqmu`` the
    per-``mu`` rule is the exact one-dimensional quantile function.
    """

    name: str
    inst: ProblemInstance
    truth_points: tuple
    alpha_levels: tuple
    reps: int
    methods: tuple
    search_lower: np.ndarray
    search_upper: np.ndarray
    mu_grid: np.ndarray
    budget: int = 100
    budget_mu: int = 60
    n_per_eval: int = 10_000
    analytic_mqmu: bool = False
    notes: str = ""

    def __post_init__(self):
        for x in self.truth_points:
            if not self.inst.constraints.contains(x):
                raise ValueError(f"truth point {x} lies outside the constraint set")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")

    def with_overrides(self, **kw) -> "Scenario":
        return replace(self, **kw)

    def config(self) -> dict:
        return {
            "name": self.name,
            "truth_points": [list(map(float, x)) for x in self.truth_points],
            "alpha_levels": list(map(float, self.alpha_levels)),
            "reps": int(self.reps),
            "methods": list(self.methods),
            "search_lower": list(map(float, self.search_lower)),
            "search_upper": list(map(float, self.search_upper)),
            "mu_grid": [float(v) for v in self.mu_grid],
            "budget": self.budget,
            "budget_mu": self.budget_mu,
            "n_per_eval": self.n_per_eval,
            "analytic_mqmu": self.analytic_mqmu,
        }


def _grid(lo, hi, step):
    return np.round(np.arange(lo, hi + 0.5 * step, step), 12)


def _one_d() -> Scenario:
    return Scenario(
        name="oneD", inst=one_dim_model(),
        truth_points=tuple(np.array([v]) for v in (0.0, 0.125, 0.25, 0.5, 1.0, 2.0)),
        alpha_levels=(0.05,), reps=100_000, methods=("ssb", "osb", "mqmu"),
        search_lower=np.zeros(1), search_upper=np.full(1, 4.0), mu_grid=_grid(0.0, 4.0, 0.25),
        analytic_mqmu=True,
    )


def _two_d() -> Scenario:
    return Scenario(
        name="twoD", inst=two_dim_counterexample(),
        truth_points=(np.array([0.0, 0.0]), np.array([0.33, 0.33]), np.array([0.2, 0.6])),
        alpha_levels=(0.05,), reps=50_000, methods=METHODS,
        search_lower=np.zeros(2), search_upper=np.full(2, 4.0), mu_grid=_grid(-4.0, 4.0, 0.25),
        notes="truth (0.2, 0.6) is a chosen point off the slice h@x = 0",
    )


def _three_d(alpha: float, name: str) -> Scenario:
    return Scenario(
        name=name, inst=three_dim_counterexample(),
        truth_points=(np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])),
        alpha_levels=(alpha,), reps=50_000, methods=METHODS,
        search_lower=np.zeros(3), search_upper=np.full(3, 3.0), mu_grid=_grid(-4.0, 4.0, 0.25),
    )


def _box() -> Scenario:
    return Scenario(
        name="box", inst=box_model(),
        truth_points=(np.array([0.0, 0.0]), np.array([0.33, 0.33]), np.array([0.2, 0.6])),
        alpha_levels=(0.05,), reps=50_000, methods=METHODS,
        search_lower=np.zeros(2), search_upper=np.ones(2), mu_grid=_grid(-1.0, 1.0, 0.1),
        notes="truth points copied from twoD",
    )


PRESETS = {
    "oneD": _one_d,
    "twoD": _two_d,
    "threeD": lambda: _three_d(0.32, "threeD"),
    "threeD95": lambda: _three_d(0.05, "threeD95"),
    "box": _box,
}


def preset(name: str) -> Scenario:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def build_rules(sc: Scenario, alpha: float, seed: int, methods=None,
                threads: int | None = None) -> dict[str, DecisionRule]:
    """Decision rules for each method at level ``1 - alpha``.

    MQ and MQmu rules are computed by simulation with substreams of
    ``seed``; their provenance records the settings.
    """
    methods = tuple(sc.methods if methods is None else methods)
    stat = LlrStatistic(sc.inst)
    level = 1.0 - alpha
    mq_seed, mqmu_seed = (int(s.generate_state(1)[0]) for s in _random.spawn(seed, 2))
    rules: dict[str, DecisionRule] = {}
    for m in methods:
        if m in ("ssb", "osb"):
            rules[m] = rule_for_method(m, alpha, sc.inst.m)
        elif m == "mq":
            res = max_quantile(stat, level, sc.search_lower, sc.search_upper, budget=sc.budget,
                               n_per_eval=sc.n_per_eval, seed=mq_seed, threads=threads)
            rules[m] = res.rule()
        elif m == "mqmu":
            if sc.analytic_mqmu:
                rules[m] = DecisionRule.analytic(
                    lambda mu, lv=level: quantile_1d_constrained(np.maximum(mu, 0.0), lv),
                    level, provenance="exact quantile of the one-dimensional null distribution")
            else:
                rules[m] = max_quantile_per_mu(
                    stat, level, sc.mu_grid, sc.search_lower, sc.search_upper,
                    budget=sc.budget_mu, n_per_eval=sc.n_per_eval, seed=mqmu_seed,
                    threads=threads).rule
    return rules


@dataclass(frozen=True)
class CoverageRow:
    truth: tuple
    method: str
    alpha: float
    covered: int
    reps: int
    coverage: float
    cov_lo: float
    cov_hi: float
    mean_len: float
    len_se: float
    empty_count: int
    unbounded_count: int
    failures: int
    seed: int

    @property
    def cp_half_width(self) -> float:
        return 0.5 * (self.cov_hi - self.cov_lo)


CSV_HEADER = ["truth", "method", "alpha", "coverage", "cov_lo", "cov_hi", "mean_len", "len_se",
              "empty_count", "reps", "seed"]


@dataclass(frozen=True, eq=False)
class CoverageReport:
    scenario: str
    rows: tuple
    seed: int
    config: dict = field(default_factory=dict)
    rules: dict = field(default_factory=dict)

    def row(self, truth, method: str, alpha: float | None = None) -> CoverageRow:
        t = tuple(float(v) for v in np.atleast_1d(truth))
        for r in self.rows:
            if r.truth == t and r.method == method and (alpha is None or abs(r.alpha - alpha) < 1e-12):
                return r
        raise KeyError((t, method, alpha))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([_truth_label(r.truth), r.method, _fmt(r.alpha), _fmt(r.coverage),
                        _fmt(r.cov_lo), _fmt(r.cov_hi), _fmt(r.mean_len), _fmt(r.len_se),
                        r.empty_count, r.reps, r.seed])
        return buf.getvalue()

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            d = {k: getattr(r, k) for k in r.__dataclass_fields__}
            d["truth"] = list(r.truth)
            for k in ("mean_len", "len_se"):
                if isinstance(d[k], float) and math.isnan(d[k]):
                    d[k] = None
            rows.append(d)
        return {"scenario": self.scenario, "seed": self.seed, "config": self.config,
                "rules": self.rules, "rows": rows}


def _rule_summary(rule: DecisionRule) -> dict:
    if rule.kind == "analytic":
        return {"kind": "analytic", "level": rule.level, "provenance": rule.provenance}
    return rule.to_dict()


def run_coverage(sc: Scenario, seed: int, rules: dict | None = None, reps: int | None = None,
                 alpha_levels=None, threads: int | None = None) -> CoverageReport:
    """Coverage and length of every method at every truth point.

    Each truth point gets its own noise substream, shared by all methods.
    Replicates whose interval computation raises are counted as failures
    and excluded from coverage and length; empty intervals count as
    non-covering with length zero; half-unbounded intervals are excluded
    from the mean length and counted in ``unbounded_count``.
    """
    reps = int(sc.reps if reps is None else reps)
    alphas = tuple(sc.alpha_levels if alpha_levels is None else alpha_levels)
    if rules is not None and len(alphas) != 1:
        raise ValueError("precomputed rules require a single alpha level")
    stat = LlrStatistic(sc.inst)
    out_rows = []
    rule_info = {}
    streams = _random.spawn(seed, len(alphas) * (len(sc.truth_points) + 1))
    for ai, alpha in enumerate(alphas):
        base = ai * (len(sc.truth_points) + 1)
        if rules is not None:
            rs = rules
        else:
            rule_seed = int(streams[base].generate_state(1)[0])
            rs = build_rules(sc, alpha, rule_seed, threads=threads)
        rule_info[repr(float(alpha))] = {m: _rule_summary(rs[m]) for m in sc.methods}
        for ti, x in enumerate(sc.truth_points):
            mu_star = float(sc.inst.h @ x)
            mean = sc.inst.forward_mean(x)

            def chunk(eps, mean=mean, mu_star=mu_star, rs=rs):
                Y = mean + eps
                res = {}
                for m in sc.methods:
                    res[m] = _chunk_stats(stat, Y, rs[m], mu_star)
                return res

            parts = _random.map_normal_chunks(chunk, streams[base + 1 + ti], reps, sc.inst.m, threads)
            for m in sc.methods:
                agg = np.sum([p[m] for p in parts], axis=0)
                out_rows.append(_row(x, m, alpha, agg, int(seed)))
    return CoverageReport(scenario=sc.name, rows=tuple(out_rows), seed=int(seed),
                          config={**sc.config(), "reps": reps, "alpha_levels": list(alphas)},
                          rules=rule_info)


def _chunk_stats(stat, Y, rule, mu_star):
    """covered, n_ok, empty, unbounded, sum_len, sum_len2, n_len, failures."""
    try:
        b = intervals_batch(stat, Y, rule)
        cov = b.covers(mu_star)
        empty = b.empty
        lengths = b.lengths()
        ok = np.ones(Y.shape[0], dtype=bool)
    except Exception:  # per-replicate fallback; failures are counted, not hidden
        cov = np.zeros(Y.shape[0], dtype=bool)
        empty = np.zeros(Y.shape[0], dtype=bool)
        lengths = np.full(Y.shape[0], np.nan)
        ok = np.zeros(Y.shape[0], dtype=bool)
        for i in range(Y.shape[0]):
            try:
                bi = intervals_batch(stat, Y[i:i + 1], rule)
            except Exception:
                continue
            ok[i] = True
            cov[i] = bi.covers(mu_star)[0]
            empty[i] = bi.empty[0]
            lengths[i] = bi.lengths()[0]
    finite = ok & np.isfinite(lengths)
    L = lengths[finite]
    return np.array([
        np.count_nonzero(cov & ok), np.count_nonzero(ok), np.count_nonzero(empty & ok),
        np.count_nonzero(ok & ~np.isfinite(lengths)), L.sum(), (L * L).sum(), L.size,
        np.count_nonzero(~ok),
    ], dtype=float)


def _row(x, method, alpha, agg, seed) -> CoverageRow:
    covered, n_ok, empty, unb, s1, s2, n_len, fail = agg
    covered, n_ok = int(covered), int(n_ok)
    lo, hi = clopper_pearson(covered, n_ok, 0.05) if n_ok else (math.nan, math.nan)
    if n_len > 1:
        mean = s1 / n_len
        var = max(s2 / n_len - mean * mean, 0.0) * n_len / (n_len - 1)
        se = math.sqrt(var / n_len)
    else:
        mean, se = math.nan, math.nan
    return CoverageRow(truth=tuple(float(v) for v in x), method=method, alpha=float(alpha),
                       covered=covered, reps=n_ok, coverage=covered / n_ok if n_ok else math.nan,
                       cov_lo=lo, cov_hi=hi, mean_len=mean, len_se=se, empty_count=int(empty),
                       unbounded_count=int(unb), failures=int(fail), seed=seed)


# ---------------------------------------------------------------------------
# counterexample checks

@dataclass(frozen=True)
class CounterexampleReport:
    """Means at ``x* = (0, 0, 1)`` of the slice minimum, the orthant minimum and the LLR."""

    n: int
    seed: int
    e_slice: float
    se_slice: float
    e_orthant: float
    se_orthant: float
    e_lambda: float
    se_lambda: float
    slice_target: float = E_SLICE_TARGET
    orthant_target: float = E_ORTHANT_TARGET

    @property
    def lambda_target(self) -> float:
        return self.slice_target - self.orthant_target

    @property
    def slice_ok(self) -> bool:
        return abs(self.e_slice - self.slice_target) <= 4 * self.se_slice

    @property
    def orthant_ok(self) -> bool:
        return abs(self.e_orthant - self.orthant_target) <= 4 * self.se_orthant

    @property
    def refuted(self) -> bool:
        """``E[lambda] > 1`` by at least four standard errors."""
        return self.e_lambda - 1.0 >= 4 * self.se_lambda

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(lambda_target=self.lambda_target, slice_ok=self.slice_ok,
                 orthant_ok=self.orthant_ok, refuted=self.refuted)
        return d


def _moments(parts, k):
    tot = np.sum(parts, axis=0)
    n = tot[-1]
    out = []
    for i in range(k):
        mean = tot[2 * i] / n
        var = max(tot[2 * i + 1] / n - mean * mean, 0.0) * n / (n - 1)
        out += [float(mean), math.sqrt(var / n)]
    return out


def run_counterexample_mean(n: int, seed: int, threads: int | None = None) -> CounterexampleReport:
    """Monte Carlo means at ``x* = (0, 0, 1)`` for the three-dimensional example."""
    if n < 2:
        raise ValueError("n must be at least 2")

    def chunk(eps):
        lam, num, sub = evaluate_3d_counterexample(eps + [0.0, 0.0, 1.0], parts=True)
        return np.array([num.sum(), (num * num).sum(), sub.sum(), (sub * sub).sum(),
                         lam.sum(), (lam * lam).sum(), lam.size])

    parts = _random.map_normal_chunks(chunk, seed, n, 3, threads)
    es, ss, eo, so, el, sl = _moments(parts, 3)
    return CounterexampleReport(n=int(n), seed=int(seed), e_slice=es, se_slice=ss, e_orthant=eo,
                                se_orthant=so, e_lambda=el, se_lambda=sl)


@dataclass(frozen=True)
class CouplingReport:
    """Pathwise bound ``lambda(0, y) <= (y1 - y2)^2 / 2`` in the two-dimensional example."""

    n: int
    seed: int
    scale: float
    violations: int
    max_excess: float
    tol: float

    @property
    def holds(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["holds"] = self.holds
        return d


def run_coupling_check(n: int, seed: int, scale: float = 2.0, tol: float = 1e-10,
                       threads: int | None = None) -> CouplingReport:
    """Count draws ``y ~ N(0, scale^2 I)`` where the bound fails by more than ``tol``.

    The bound makes ``lambda(0, y)`` under ``x* = 0`` dominated by a
    ``chi2_1`` variable.  Draws are spread wider than the null noise so that
    every sign pattern of ``y`` is well represented.
    """

    def chunk(eps):
        y = scale * eps
        excess = evaluate_2d_counterexample(y) - 0.5 * (y[:, 0] - y[:, 1]) ** 2
        return np.array([np.count_nonzero(excess > tol), excess.max()])

    parts = np.array(_random.map_normal_chunks(chunk, seed, n, 2, threads))
    return CouplingReport(n=int(n), seed=int(seed), scale=float(scale),
                          violations=int(parts[:, 0].sum()), max_excess=float(parts[:, 1].max()),
                          tol=float(tol))


@dataclass(frozen=True, eq=False)
class DivergenceReport:
    p: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    n: int
    seed: int

    @property
    def increasing(self) -> bool:
        """Every consecutive increase exceeds four combined standard errors."""
        d = np.diff(self.mean)
        comb = np.sqrt(self.se[1:] ** 2 + self.se[:-1] ** 2)
        return bool(np.all(d > 4 * comb))

    @property
    def diverging(self) -> bool:
        comb = math.sqrt(self.se[0] ** 2 + self.se[-1] ** 2)
        return bool(self.mean[-1] > self.mean[0] + 4 * comb)

    def to_csv(self) -> str:
        lines = ["p,mean,se"]
        lines += [f"{int(p)},{_fmt(m)},{_fmt(s)}" for p, m, s in zip(self.p, self.mean, self.se)]
        return "\n".join(lines) + "\n"


def run_dimension_divergence(p_list, n: int, seed: int, threads: int | None = None) -> DivergenceReport:
    """Mean LLR at ``x* = (0, ..., 0, 1)`` for ``K = I_p`` and ``h = (1, ..., 1, -1)``.

    Every ``p`` reuses ``seed``, so ``p = 3`` reproduces
    :func:`run_counterexample_mean`.
    """
    means, ses = [], []
    for p in p_list:
        if p < 3:
            raise ValueError("each p must be at least 3")
        stat = LlrStatistic(dimension_family(int(p)))
        x = np.zeros(int(p))
        x[-1] = 1.0

        def chunk(eps, stat=stat, x=x):
            lam = null_draws(stat, x, eps)
            return np.array([lam.sum(), (lam * lam).sum(), lam.size])

        m, s = _moments(_random.map_normal_chunks(chunk, seed, n, int(p), threads), 1)
        means.append(m)
        ses.append(s)
    return DivergenceReport(p=np.array(p_list, dtype=int), mean=np.array(means), se=np.array(ses),
                            n=int(n), seed=int(seed))


@dataclass(frozen=True, eq=False)
class QuantileCurve:
    t: np.ndarray
    q_hat: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    level: float
    cutoff: float
    n: int
    seed: int

    @property
    def flagged(self) -> np.ndarray:
        """Points whose quantile CI lies entirely above the chi-square cutoff."""
        return self.ci_lo > self.cutoff

    def to_csv(self) -> str:
        lines = ["t,q_hat,ci_lo,ci_hi,flagged"]
        for row in zip(self.t, self.q_hat, self.ci_lo, self.ci_hi, self.flagged):
            lines.append(",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"


def run_quantile_curve(level: float, t_grid, n: int, seed: int, conf: float = 0.95,
                       threads: int | None = None) -> QuantileCurve:
    """Null quantiles at ``x*(t) = (t, t, 1)`` for the three-dimensional example.

    All ``t`` share one noise matrix.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid <= 0) or np.any(t_grid > math.e + 1e-12):
        raise ValueError("t values must lie in (0, e]")
    stat = LlrStatistic(three_dim_counterexample())
    eps = _random.normal_matrix(seed, n, 3, threads)
    q, lo, hi = [], [], []
    for t in t_grid:
        qq, ll, hh = quantile_with_ci(null_draws(stat, (t, t, 1.0), eps), level, conf)
        q.append(qq)
        lo.append(ll)
        hi.append(hh)
    return QuantileCurve(t=t_grid, q_hat=np.array(q), ci_lo=np.array(lo), ci_hi=np.array(hi),
                         level=level, cutoff=chi2_quantile(level, 1), n=int(n), seed=int(seed))
