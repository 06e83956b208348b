import math

import numpy as np
import pytest

from llrbounds.llr import LlrStatistic
from llrbounds.model import (
    ConstraintSet,
    ProblemInstance,
    one_dim_model,
    three_dim_counterexample,
    two_dim_counterexample,
)
from llrbounds.nulldist import (
    cdf_1d_constrained,
    dominance_diagnostic,
    mean_estimate,
    quantile_1d_constrained,
    sample_null,
)
from llrbounds.stats import EmpiricalSample, chi2_cdf, chi2_quantile, normal_cdf

E_LAMBDA_3D = 13 / 6 - (1 + 2 * normal_cdf(-1.0) - math.exp(-0.5) / math.sqrt(2 * math.pi))


class TestOneDimensionalLaw:
    def test_point_mass_at_zero(self):
        s = sample_null(LlrStatistic(one_dim_model()), [0.0], 100_000, seed=0)
        frac = np.mean(s.draws.values == 0.0)
        assert abs(frac - 0.5) <= 0.01

    def test_cdf_mixture_at_zero(self):
        np.testing.assert_allclose(cdf_1d_constrained(0.0, chi2_quantile(0.95, 1)), 0.975, atol=1e-12)

    def test_cdf_lower_branch(self):
        np.testing.assert_allclose(cdf_1d_constrained(2.0, 1.0), 0.6826894921370859, atol=1e-12)

    def test_cdf_limit(self):
        assert cdf_1d_constrained(1.5, 1e4) == pytest.approx(1.0, abs=1e-15)

    def test_cdf_upper_branch_against_direct_probability(self):
        # y ~ N(mu, 1); lambda = (y - mu)^2 for y >= 0 and mu^2 - 2 mu y for y < 0,
        # so for c >= mu^2 the event {lambda <= c} is [b, 0) joined with [0, mu + sqrt(c)]
        mu, c = 0.8, 2.5
        b = (mu * mu - c) / (2 * mu)
        p_pos = normal_cdf(math.sqrt(c)) - normal_cdf(-mu)
        p_neg = normal_cdf(-mu) - normal_cdf(b - mu)
        np.testing.assert_allclose(cdf_1d_constrained(mu, c), p_pos + p_neg, atol=1e-12)

    def test_quantile_far_from_boundary(self):
        np.testing.assert_allclose(quantile_1d_constrained(10.0, 0.95), chi2_quantile(0.95, 1),
                                   rtol=1e-10)

    def test_quantile_at_zero(self):
        np.testing.assert_allclose(quantile_1d_constrained(0.0, 0.95), 2.705543454095404, rtol=1e-10)

    def test_quantile_below_half_at_zero(self):
        assert quantile_1d_constrained(0.0, 0.3) == 0.0

    @pytest.mark.parametrize("mu", [0.05, 0.5, 1.0, 2.0])
    @pytest.mark.parametrize("level", [0.5, 0.68, 0.95])
    def test_quantile_inverts_cdf(self, mu, level):
        q = quantile_1d_constrained(mu, level)
        np.testing.assert_allclose(cdf_1d_constrained(mu, q), level, atol=1e-9)

    def test_rejects_negative_mu(self):
        with pytest.raises(ValueError):
            cdf_1d_constrained(-1.0, 1.0)

    @pytest.mark.parametrize("mu", [0.0, 0.3, 1.5])
    def test_empirical_cdf_matches(self, mu):
        n = 100_000
        s = sample_null(LlrStatistic(one_dim_model()), [mu], n, seed=1)
        c = np.unique(s.draws.values)
        ks = np.max(np.abs(s.draws.cdf(c) - cdf_1d_constrained(mu, c)))
        assert ks <= 2 / math.sqrt(n)

    def test_analytic_dominance(self):
        c = np.geomspace(1e-4, 30, 2000)
        ref = chi2_cdf(c, 1)
        for mu in np.round(np.arange(0, 5.01, 0.1), 10):
            assert np.all(cdf_1d_constrained(mu, c) >= ref - 1e-12)


class TestSampling:
    def test_threads_do_not_change_draws(self):
        stat = LlrStatistic(three_dim_counterexample())
        a = sample_null(stat, [0, 0, 1], 70_000, seed=3, threads=1)
        b = sample_null(stat, [0, 0, 1], 70_000, seed=3, threads=4)
        np.testing.assert_array_equal(a.draws.values, b.draws.values)

    def test_seed_recorded(self):
        s = sample_null(LlrStatistic(one_dim_model()), [1.0], 1000, seed=42)
        assert s.seed == 42
        assert s.mu == 1.0

    def test_outside_set_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            sample_null(LlrStatistic(one_dim_model()), [-1.0], 100, seed=0)


class TestDominance:
    @pytest.mark.parametrize("x", [(0.0, 0.0), (0.33, 0.33)])
    def test_two_dim_dominated(self, x):
        s = sample_null(LlrStatistic(two_dim_counterexample()), x, 1_000_000, seed=0)
        assert dominance_diagnostic(s).verdict == "Dominated"

    def test_three_dim_not_dominated(self):
        s = sample_null(LlrStatistic(three_dim_counterexample()), [0, 0, 1], 1_000_000, seed=0)
        res = dominance_diagnostic(s)
        assert res.verdict == "NotDominated"
        assert res.violations.size >= 1
        assert np.all((res.failing_levels() > 0) & (res.failing_levels() < 1))

    def test_chi2_self_comparison(self):
        rng = np.random.default_rng(0)
        s = EmpiricalSample.from_draws(rng.standard_normal(1_000_000) ** 2)
        res = dominance_diagnostic(s)
        assert res.dominated
        assert np.max(np.abs(res.delta_cdf)) < 5e-3

    def test_dominated_quantile_is_valid(self):
        s = sample_null(LlrStatistic(two_dim_counterexample()), (0.33, 0.33), 200_000, seed=4)
        assert dominance_diagnostic(s).dominated
        alpha = 0.05
        q = chi2_quantile(1 - alpha, 1)
        exceed = np.mean(s.draws.values > q)
        assert exceed <= alpha + 3 * math.sqrt(alpha * (1 - alpha) / s.n)

    def test_grid_layout(self):
        s = EmpiricalSample.from_draws(np.random.default_rng(1).chisquare(1, 20_000))
        res = dominance_diagnostic(s)
        assert res.c.size == 512
        assert res.c[0] == pytest.approx(1e-4)
        assert res.c[-1] == pytest.approx(1.05 * s.values[-1])
        np.testing.assert_allclose(np.diff(np.log(res.c)), np.log(res.c[1] / res.c[0]))

    def test_csv(self):
        s = EmpiricalSample.from_draws(np.random.default_rng(2).chisquare(1, 20_000))
        lines = dominance_diagnostic(s).to_csv().splitlines()
        assert lines[0] == "c,delta_cdf,sigma"
        assert len(lines) == 513

    def test_small_sample_rejected(self):
        with pytest.raises(ValueError, match="n >= 10000"):
            dominance_diagnostic(EmpiricalSample.from_draws(np.ones(100)))


class TestMeans:
    def test_three_dim_mean(self):
        s = sample_null(LlrStatistic(three_dim_counterexample()), [0, 0, 1], 1_000_000, seed=5)
        mean, se = mean_estimate(s)
        assert abs(mean - E_LAMBDA_3D) <= 4 * se

    def test_unconstrained_mean(self):
        inst = ProblemInstance(np.eye(2), [1.0, 1.0], ConstraintSet.unconstrained(2))
        mean, se = mean_estimate(sample_null(LlrStatistic(inst), [0.2, -0.3], 200_000, seed=6))
        assert abs(mean - 1.0) <= 4 * se

    def test_one_dim_mean_at_zero(self):
        mean, se = mean_estimate(sample_null(LlrStatistic(one_dim_model()), [0.0], 200_000, seed=7))
        assert abs(mean - 0.5) <= 4 * se
