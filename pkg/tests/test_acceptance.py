"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -m acceptance tests/test_acceptance.py``.  Seeds are
fixed, so every verdict is reproducible.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats as sps

from llrbounds import _random
from llrbounds.experiments import (
    E_ORTHANT_TARGET,
    E_SLICE_TARGET,
    build_rules,
    preset,
    run_counterexample_mean,
    run_coupling_check,
    run_coverage,
    run_dimension_divergence,
)
from llrbounds.intervals import interval_osb, interval_unconstrained_closed_form
from llrbounds.llr import LlrStatistic
from llrbounds.maxquantile import max_quantile
from llrbounds.model import (
    ConstraintSet,
    ProblemInstance,
    one_dim_model,
    three_dim_counterexample,
    two_dim_counterexample,
)
from llrbounds.nulldist import dominance_diagnostic, null_draws, sample_null
from llrbounds.solver import brute_force_min, min_residual_on_slice
from llrbounds.stats import chi2_quantile

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    start = time.perf_counter()

    def report(number: int, checks: dict, limit_s: float, detail: str = ""):
        elapsed = time.perf_counter() - start
        checks = {**checks, f"runtime<={limit_s:g}s": elapsed <= limit_s}
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        with capsys.disabled():
            print(f"\nCRITERION {number:2d} {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s) {detail}"
                  + (f" failed: {', '.join(failed)}" if failed else ""))
        assert ok, f"criterion {number} failed: {failed} {detail}"

    return report


def test_criterion_01_counterexample_means(verdict):
    r = run_counterexample_mean(1_000_000, seed=7)
    verdict(1, {"slice": abs(r.e_slice - E_SLICE_TARGET) <= 4 * r.se_slice,
                "orthant": abs(r.e_orthant - E_ORTHANT_TARGET) <= 4 * r.se_orthant,
                "lambda>1": r.e_lambda - 1.0 >= 4 * r.se_lambda},
            60, f"E[slice]={r.e_slice:.5f}+-{r.se_slice:.4f} E[orthant]={r.e_orthant:.5f}"
                f"+-{r.se_orthant:.4f} E[lambda]={r.e_lambda:.5f}+-{r.se_lambda:.4f}")


def test_criterion_02_dominance_verdicts(verdict):
    two = LlrStatistic(two_dim_counterexample())
    three = LlrStatistic(three_dim_counterexample())
    a = dominance_diagnostic(sample_null(two, (0.0, 0.0), 1_000_000, seed=0))
    b = dominance_diagnostic(sample_null(two, (0.33, 0.33), 1_000_000, seed=0))
    c = dominance_diagnostic(sample_null(three, (0.0, 0.0, 1.0), 1_000_000, seed=0))
    verdict(2, {"2D (0,0) Dominated": a.verdict == "Dominated",
                "2D (0.33,0.33) Dominated": b.verdict == "Dominated",
                "3D NotDominated": c.verdict == "NotDominated" and c.violations.size >= 1},
            300, f"verdicts {a.verdict}/{b.verdict}/{c.verdict}, 3D violations={c.violations.size}")


def test_criterion_03_coupling(verdict):
    r = run_coupling_check(1_000_000, seed=0, tol=1e-10)
    verdict(3, {"no violations": r.violations == 0}, 30,
            f"violations={r.violations} max_excess={r.max_excess:.3g}")


def test_criterion_04_one_dim_calibration(verdict):
    sc = preset("oneD").with_overrides(truth_points=(np.array([0.0]),), methods=("osb", "mqmu"))
    rep = run_coverage(sc, seed=1, reps=100_000, alpha_levels=(0.05,))
    osb, mqmu = rep.row(0.0, "osb"), rep.row(0.0, "mqmu")
    verdict(4, {"OSB 0.975": osb.cov_lo <= 0.975 <= osb.cov_hi,
                "MQmu 0.95": mqmu.cov_lo <= 0.95 <= mqmu.cov_hi},
            120, f"OSB {osb.coverage:.5f} [{osb.cov_lo:.5f}, {osb.cov_hi:.5f}] "
                 f"MQmu {mqmu.coverage:.5f} [{mqmu.cov_lo:.5f}, {mqmu.cov_hi:.5f}]")


def test_criterion_05_three_dim_undercoverage(verdict):
    sc = preset("threeD").with_overrides(truth_points=(np.array([0.0, 0.0, 1.0]),))
    rules = build_rules(sc, 0.32, seed=5)
    rep = run_coverage(sc, seed=1, rules=rules, reps=50_000)
    x = (0.0, 0.0, 1.0)
    checks = {"OSB cov_hi<0.68": rep.row(x, "osb").cov_hi < 0.68}
    detail = []
    for m in ("ssb", "mq", "mqmu"):
        r = rep.row(x, m)
        checks[f"{m} >= 0.68 - hw"] = r.coverage >= 0.68 - r.cp_half_width
        detail.append(f"{m}={r.coverage:.4f}[{r.cov_lo:.4f},{r.cov_hi:.4f}]")
    r = rep.row(x, "osb")
    detail.append(f"osb={r.coverage:.4f}[{r.cov_lo:.4f},{r.cov_hi:.4f}]")
    verdict(5, checks, 900, " ".join(detail))


def test_criterion_06_mq_recovers_chi2_quantile(verdict):
    target = chi2_quantile(0.95, 1)
    res = max_quantile(LlrStatistic(two_dim_counterexample()), 0.95, [0, 0], [1, 1], budget=200,
                       n_per_eval=10_000, seed=0)
    verdict(6, {"CI brackets 3.8415": res.ci[0] <= target <= res.ci[1]}, 300,
            f"q={res.q:.4f} CI=[{res.ci[0]:.4f}, {res.ci[1]:.4f}] argmax={res.argmax.round(3).tolist()}")


def test_criterion_07_box_shortening(verdict):
    sc = preset("box").with_overrides(methods=("osb", "mqmu"))
    rules = build_rules(sc, 0.05, seed=5)
    rep = run_coverage(sc, seed=1, rules=rules, reps=50_000)
    checks, detail = {}, []
    for x in sc.truth_points:
        o, q = rep.row(x, "osb"), rep.row(x, "mqmu")
        se = math.hypot(o.len_se, q.len_se)
        label = ",".join(f"{v:g}" for v in x)
        checks[f"({label}) shorter"] = q.mean_len < o.mean_len - 4 * se
        checks[f"({label}) coverage"] = q.coverage >= 0.95 - q.cp_half_width
        detail.append(f"({label}) len {q.mean_len:.4f} vs {o.mean_len:.4f} cov {q.coverage:.4f}")
    verdict(7, checks, 900, "; ".join(detail))


def _bounded_instance(rng, p):
    m = p + int(rng.integers(0, 3))
    lo = rng.uniform(-1, 0, size=p)
    hi = lo + rng.uniform(0.5, 2, size=p)
    if rng.uniform() < 0.5:
        cs = ConstraintSet.box(lo, hi)
    else:
        # box rows plus one cut through the box centre
        a = rng.normal(size=p)
        A = np.vstack([np.eye(p), -np.eye(p), a])
        b = np.concatenate([hi, -lo, [a @ (0.5 * (lo + hi))]])
        cs = ConstraintSet.linear(A, b)
    return ProblemInstance(rng.normal(size=(m, p)), rng.normal(size=p), cs), lo, hi


def test_criterion_08_oracle_equivalence(verdict):
    rng = np.random.default_rng(8)
    worst_grid = 0.0
    for p in (2, 3):
        for _ in range(100):
            inst, lo, hi = _bounded_instance(rng, p)
            y = inst.K @ rng.uniform(lo, hi) + rng.normal(size=inst.m)
            flo, fhi = inst.functional_range()
            mu = float(rng.uniform(flo + 0.1 * (fhi - flo), fhi - 0.1 * (fhi - flo)))
            sol = min_residual_on_slice(inst, y, mu)
            grid = brute_force_min(inst, y, mu, lower=lo, upper=hi, step=0.01, refine=3)
            worst_grid = max(worst_grid, abs(sol.objective - grid.objective))

    worst_closed = 0.0
    n = 10_000
    one = LlrStatistic(one_dim_model())
    two = LlrStatistic(two_dim_counterexample())
    three = LlrStatistic(three_dim_counterexample())
    for y, mu in zip(rng.normal(size=n) * 2, rng.uniform(0, 4, size=n)):
        worst_closed = max(worst_closed, abs(one.evaluate(mu, [y]) - one.evaluate_generic(mu, [y])))
    for y in rng.normal(size=(n, 2)) * 2:
        worst_closed = max(worst_closed, abs(two.evaluate(0.0, y) - two.evaluate_generic(0.0, y)))
    for y in rng.normal(size=(n, 3)) + [0.0, 0.0, 1.0]:
        worst_closed = max(worst_closed, abs(three.evaluate(-1.0, y) - three.evaluate_generic(-1.0, y)))
    for i in range(n):
        if i % 100 == 0:
            p = int(rng.integers(1, 4))
            K = rng.normal(size=(p + 1, p))
            unc = LlrStatistic(ProblemInstance(K, rng.normal(size=p), ConstraintSet.unconstrained(p)))
        y, mu = rng.normal(size=unc.inst.m) * 2, rng.normal()
        worst_closed = max(worst_closed, abs(unc.evaluate(mu, y) - unc.evaluate_generic(mu, y)))
    verdict(8, {"grid 1e-3": worst_grid <= 1e-3, "closed forms 1e-6": worst_closed <= 1e-6}, 300,
            f"max grid gap={worst_grid:.2e} max closed-form gap={worst_closed:.2e}")


def test_criterion_09_unconstrained_exactness(verdict):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        p = int(rng.integers(1, 5))
        K = rng.normal(size=(p + int(rng.integers(0, 3)), p))
        inst = ProblemInstance(K, rng.normal(size=p), ConstraintSet.unconstrained(p))
        y = rng.normal(size=inst.m) * 3
        alpha = float(rng.choice([0.05, 0.1, 0.32]))
        a = interval_osb(inst, y, alpha)
        b = interval_unconstrained_closed_form(inst, y, alpha)
        worst = max(worst, abs(a.lower - b.lower), abs(a.upper - b.upper))
    inst = ProblemInstance(rng.normal(size=(3, 2)), [1.0, -0.5], ConstraintSet.unconstrained(2))
    lam = null_draws(LlrStatistic(inst), [0.3, 0.7], _random.normal_matrix(9, 100_000, 3))
    ks = sps.kstest(lam, "chi2", args=(1,))
    verdict(9, {"interval 1e-6": worst <= 1e-6, "KS p>0.05": ks.pvalue > 0.05}, 60,
            f"max endpoint gap={worst:.2e} KS D={ks.statistic:.4f} p={ks.pvalue:.3f}")


def test_criterion_10_dimension_divergence(verdict):
    r = run_dimension_divergence([3, 6, 12, 24], 100_000, seed=10)
    verdict(10, {"strictly increasing": r.increasing}, 300,
            "means " + ", ".join(f"p={p}: {m:.4f}+-{s:.4f}" for p, m, s in zip(r.p, r.mean, r.se)))
