import json
import math

import numpy as np
import pytest

from llrbounds import _random
from llrbounds.llr import LlrStatistic
from llrbounds.maxquantile import (
    DecisionRule,
    cco_certify,
    max_quantile,
    max_quantile_per_mu,
    quantile_with_ci,
)
from llrbounds.model import (
    ConstraintSet,
    ProblemInstance,
    box_model,
    one_dim_model,
    two_dim_counterexample,
)
from llrbounds.nulldist import null_draws
from llrbounds.stats import EmpiricalSample, chi2_cdf, chi2_quantile, empirical_quantile

Q95 = chi2_quantile(0.95, 1)


class TestDecisionRule:
    def test_scalar(self):
        r = DecisionRule.scalar(2.0, 0.9)
        assert r.is_constant
        assert r(5.0) == 2.0
        np.testing.assert_array_equal(r(np.array([0.0, 1.0])), [2.0, 2.0])

    def test_chi2_kinds(self):
        assert DecisionRule.chi2_one(0.95).q == pytest.approx(Q95)
        r = DecisionRule.chi2_m(0.95, 2)
        assert r.df == 2
        assert r.q == pytest.approx(5.991464547107979)

    def test_per_mu_max_of_neighbours(self):
        r = DecisionRule.per_mu([0.0, 1.0, 2.0], [1.0, 3.0, 2.0], 0.9)
        np.testing.assert_array_equal(r([0.5, 1.0, 1.5, 2.0]), [3.0, 3.0, 3.0, 3.0])
        r2 = DecisionRule.per_mu([0.0, 1.0, 2.0], [1.0, 0.5, 2.0], 0.9)
        # an end of the grid also borders the outside cell, which takes the overall maximum
        np.testing.assert_array_equal(r2([0.25, 0.0, 1.0, 1.75]), [1.0, 2.0, 2.0, 2.0])

    def test_per_mu_outside_grid_uses_max(self):
        r = DecisionRule.per_mu([0.0, 1.0], [1.0, 0.5], 0.9)
        assert r(-10.0) == 1.0
        assert r(10.0) == 1.0

    def test_per_mu_sorted(self):
        r = DecisionRule.per_mu([2.0, 0.0], [5.0, 1.0], 0.9)
        np.testing.assert_array_equal(r.mu_grid, [0.0, 2.0])
        np.testing.assert_array_equal(r.q_values, [1.0, 5.0])

    def test_cells(self):
        edges, vals = DecisionRule.per_mu([0.0, 1.0, 2.0], [1.0, 3.0, 2.0], 0.9).cells()
        np.testing.assert_array_equal(edges, [0.0, 1.0, 2.0])
        np.testing.assert_array_equal(vals, [3.0, 3.0, 3.0, 3.0])

    @pytest.mark.parametrize("rule", [
        DecisionRule.scalar(1.5, 0.68, "test", seed=3),
        DecisionRule.chi2_m(0.95, 3),
        DecisionRule.per_mu([0.0, 0.5], [1.0, 2.0], 0.95, "grid", seed=1),
    ])
    def test_json_round_trip(self, rule):
        back = DecisionRule.from_json(rule.to_json())
        assert back.to_dict() == rule.to_dict()

    def test_json_schema_keys(self):
        d = json.loads(DecisionRule.per_mu([0.0], [1.0], 0.9).to_json())
        assert set(d) == {"kind", "level", "mu_grid", "q_values", "provenance", "seed"}

    def test_analytic_not_serializable(self):
        with pytest.raises(TypeError):
            DecisionRule.analytic(lambda mu: mu, 0.9).to_json()

    @pytest.mark.parametrize("kw", [
        dict(kind="scalar", level=1.0, q=1.0),
        dict(kind="scalar", level=0.9, q=-1.0),
        dict(kind="per_mu", level=0.9, mu_grid=[0.0, 0.0], q_values=[1.0, 1.0]),
        dict(kind="per_mu", level=0.9, mu_grid=[0.0], q_values=[1.0, 2.0]),
        dict(kind="nope", level=0.9),
    ])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            DecisionRule(**kw)

    def test_missing_key_named(self):
        with pytest.raises(ValueError, match="'q'"):
            DecisionRule.from_dict({"kind": "scalar", "level": 0.9})


class TestQuantileWithCi:
    def test_matches_sorted_estimators(self):
        draws = np.random.default_rng(0).exponential(size=5000)
        q, lo, hi = quantile_with_ci(draws, 0.9)
        s = EmpiricalSample.from_draws(draws)
        assert q == empirical_quantile(s, 0.9)
        assert lo <= q <= hi


class TestMaxQuantile:
    def test_degenerate_box(self):
        stat = LlrStatistic(two_dim_counterexample())
        x0 = np.array([0.4, 0.7])
        res = max_quantile(stat, 0.9, x0, x0, budget=10, n_per_eval=5000, seed=2)
        noise_seed = _random.spawn(2, 2)[0]
        eps = _random.normal_matrix(noise_seed, 5000, 2)
        ref = empirical_quantile(EmpiricalSample.from_draws(null_draws(stat, x0, eps)), 0.9)
        assert res.q == ref
        np.testing.assert_array_equal(res.argmax, x0)

    def test_box_constrained_below_chi2(self):
        res = max_quantile(LlrStatistic(box_model()), 0.95, [0, 0], [1, 1], budget=200,
                           n_per_eval=10_000, seed=0)
        assert res.ci[1] < Q95

    def test_orthant_wide_box_recovers_chi2(self):
        res = max_quantile(LlrStatistic(two_dim_counterexample()), 0.95, [0, 0], [4, 4],
                           budget=200, n_per_eval=10_000, seed=0)
        assert res.ci[0] <= Q95 <= res.ci[1]

    def test_orthant_unit_box_stays_below(self):
        # the null laws are dominated by chi2_1 and approach it only far from the origin
        res = max_quantile(LlrStatistic(two_dim_counterexample()), 0.95, [0, 0], [1, 1],
                           budget=100, n_per_eval=10_000, seed=1)
        assert res.ci[1] < Q95

    def test_one_dim_reaches_far_end(self):
        res = max_quantile(LlrStatistic(one_dim_model()), 0.95, [0.0], [6.0], budget=60,
                           n_per_eval=20_000, seed=3)
        assert res.ci[0] <= Q95 <= res.ci[1]
        assert res.argmax[0] > 2.0

    def test_monotone_in_level(self):
        stat = LlrStatistic(box_model())
        qs = [max_quantile(stat, lv, [0, 0], [1, 1], budget=60, n_per_eval=5000, seed=4).q
              for lv in (0.5, 0.68, 0.95)]
        assert qs[0] <= qs[1] <= qs[2]

    def test_deterministic(self):
        stat = LlrStatistic(box_model())
        a = max_quantile(stat, 0.9, [0, 0], [1, 1], budget=40, n_per_eval=4000, seed=5, threads=1)
        b = max_quantile(stat, 0.9, [0, 0], [1, 1], budget=40, n_per_eval=4000, seed=5, threads=3)
        assert a.q == b.q
        np.testing.assert_array_equal(a.argmax, b.argmax)

    def test_rule_is_conservative(self):
        res = max_quantile(LlrStatistic(box_model()), 0.9, [0, 0], [1, 1], budget=40,
                           n_per_eval=4000, seed=6)
        assert res.rule().q == res.ci[1]
        assert res.rule(conservative=False).q == res.q
        assert res.rule().seed == 6

    def test_rule_controls_type_one_error(self):
        stat = LlrStatistic(box_model())
        alpha = 0.05
        q = max_quantile(stat, 1 - alpha, [0, 0], [1, 1], budget=100, n_per_eval=10_000,
                         seed=7).rule().q
        n = 20_000
        eps = _random.normal_matrix(99, n, 2)
        sigma = math.sqrt(alpha * (1 - alpha) / n)
        for x in [(0, 0), (1, 1), (0, 1), (1, 0), (0.5, 0.5), (0.2, 0.9)]:
            err = np.mean(null_draws(stat, x, eps) > q)
            assert err <= alpha + 3 * sigma

    def test_box_outside_set_rejected(self):
        with pytest.raises(ValueError):
            max_quantile(LlrStatistic(box_model()), 0.9, [0, 0], [2, 1], budget=5, n_per_eval=100)


class TestPerMu:
    def test_single_grid_point_equals_slice_search(self):
        stat = LlrStatistic(box_model())
        res = max_quantile_per_mu(stat, 0.9, [0.3], [0, 0], [1, 1], budget=40,
                                  n_per_eval=5000, seed=8)
        assert res.rule.q_values.size == 1
        # search the slice h @ x = 0.3 directly: x = (t + 0.3, t)
        noise_seed = _random.spawn(8, 2)[0]
        eps = _random.normal_matrix(noise_seed, 5000, 2)
        grid = np.linspace(0, 0.7, 141)
        qs = [quantile_with_ci(null_draws(stat, (t + 0.3, t), eps), 0.9)[0] for t in grid]
        assert abs(res.q[0] - max(qs)) <= 0.02

    def test_scalar_dominates_per_mu(self):
        stat = LlrStatistic(box_model())
        scalar = max_quantile(stat, 0.95, [0, 0], [1, 1], budget=100, n_per_eval=10_000, seed=9)
        per = max_quantile_per_mu(stat, 0.95, np.linspace(-1, 1, 9), [0, 0], [1, 1], budget=40,
                                  n_per_eval=10_000, seed=9)
        for lo in per.ci_lo:
            assert lo <= scalar.ci[1]

    def test_infeasible_grid_points_dropped(self):
        stat = LlrStatistic(box_model())
        res = max_quantile_per_mu(stat, 0.9, [-2.0, 0.0, 2.0], [0, 0], [1, 1], budget=20,
                                  n_per_eval=2000, seed=1)
        assert res.dropped == [-2.0, 2.0]
        np.testing.assert_array_equal(res.rule.mu_grid, [0.0])

    def test_rule_stores_upper_ends(self):
        res = max_quantile_per_mu(LlrStatistic(box_model()), 0.9, [-0.5, 0.5], [0, 0], [1, 1],
                                  budget=20, n_per_eval=2000, seed=2)
        np.testing.assert_array_equal(res.rule.q_values, res.ci_hi)


class TestCco:
    def test_unconstrained_boundary(self):
        inst = ProblemInstance(np.eye(2), [1.0, 1.0], ConstraintSet.unconstrained(2))
        res = cco_certify(LlrStatistic(inst), [0.3, 0.1], Q95, 0.95, 100_000, seed=0)
        assert res.consistent_with_boundary

    def test_one_dim_feasible(self):
        res = cco_certify(LlrStatistic(one_dim_model()), [0.0], 2.0, 0.95, 100_000, seed=1)
        expected = 0.5 * (1 + chi2_cdf(2.0, 1))
        assert abs(res.p_hat - expected) <= 4 * res.sigma
        assert res.feasible

    def test_infinite_q_infeasible(self):
        res = cco_certify(LlrStatistic(one_dim_model()), [0.5], math.inf, 0.95, 1000, seed=2)
        assert res.p_hat == 1.0
        assert not res.feasible
