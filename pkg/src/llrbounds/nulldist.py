"""Null distributions of the LLR statistic and dominance diagnostics.

``F_x`` denotes the law of ``lambda(h @ x, y)`` for ``y ~ N(K x, I)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import _random
from .llr import LlrStatistic
from .stats import EmpiricalSample, chi2_cdf, chi2_quantile

__all__ = [
    "NullSample",
    "DominanceResult",
    "sample_null",
    "null_draws",
    "cdf_1d_constrained",
    "quantile_1d_constrained",
    "dominance_diagnostic",
    "mean_estimate",
]


@dataclass(frozen=True, eq=False)
class NullSample:
    """Monte Carlo draws from ``F_x``."""

    x: np.ndarray
    mu: float
    draws: EmpiricalSample
    seed: int | None
    n: int


def null_draws(stat: LlrStatistic, x, eps: np.ndarray) -> np.ndarray:
    """``lambda(h @ x, K x + eps)`` for each row of a fixed noise matrix."""
    inst = stat.inst
    x = np.asarray(x, dtype=float)
    Y = inst.forward_mean(x) + eps
    return stat.evaluate_batch(float(inst.h @ x), Y)


def sample_null(stat: LlrStatistic, x, n: int, seed, threads: int | None = None,
                check_membership: bool = True) -> NullSample:
    """Draw ``n`` values of the statistic at ``x``.

    Chunks of noise come from independent substreams of ``seed``, so the
    sample does not depend on ``threads``.
    """
    inst = stat.inst
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != inst.p:
        raise ValueError(f"x has length {x.shape[0]}, expected {inst.p}")
    if check_membership and not inst.constraints.contains(x):
        raise ValueError("x lies outside the constraint set")
    parts = _random.map_normal_chunks(lambda e: null_draws(stat, x, e), seed, n, inst.m, threads)
    draws = np.concatenate(parts)
    return NullSample(x=x, mu=float(inst.h @ x), draws=EmpiricalSample.from_draws(draws),
                      seed=None if seed is None else int(_seed_int(seed)), n=int(n))


def _seed_int(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.entropy)
    return int(seed)


# ---------------------------------------------------------------------------
# one-dimensional model ``y = x + eps``, ``x >= 0``

def _check_nonneg(v, name):
    arr = np.asarray(v, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError(f"{name} must be nonnegative")
    return arr


def cdf_1d_constrained(mu, c):
    """CDF of ``lambda(mu, y)`` for ``y ~ N(mu, 1)`` with ``mu >= 0``.

    ``mu = 0`` gives the mixture ``(1 + chi2_1(c)) / 2``.  For ``mu > 0``
    it is ``chi2_1(c)`` below ``mu^2`` and
    ``Phi(sqrt(c)) - Phi(-(mu^2 + c) / (2 mu))`` above.
    """
    mu = _check_nonneg(mu, "mu")
    c = _check_nonneg(c, "c")
    mu, c = np.broadcast_arrays(mu, c)
    out = np.empty(mu.shape)
    zero = mu == 0
    out[zero] = 0.5 * (1.0 + chi2_cdf(c[zero], 1))
    pos = ~zero
    mp, cp = mu[pos], c[pos]
    with np.errstate(divide="ignore", invalid="ignore"):
        upper = ndtr(np.sqrt(cp)) - ndtr(-(mp * mp + cp) / (2.0 * mp))
    out[pos] = np.where(cp < mp * mp, chi2_cdf(cp, 1), upper)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def quantile_1d_constrained(mu, level, tol: float = 1e-12):
    """Inverse of :func:`cdf_1d_constrained` in ``c``.

    Below ``chi2_1(mu^2)`` the quantile is the chi-square one; otherwise it is
    the root in ``[mu^2, Q_{chi2_1}(level)]``, found by bisection.
    """
    mu = _check_nonneg(mu, "mu")
    level = np.asarray(level, dtype=float)
    if np.any((level <= 0) | (level >= 1)):
        raise ValueError("level must lie strictly between 0 and 1")
    mu, level = np.broadcast_arrays(mu, level)
    mu = mu.astype(float)
    q_chi = np.asarray(chi2_quantile(level, 1), dtype=float)
    out = q_chi.copy()
    zero = mu == 0
    if np.any(zero):
        lz = level[zero]
        out[zero] = np.where(lz > 0.5, chi2_quantile(np.clip(2 * lz - 1, 1e-300, None), 1), 0.0)
    root = ~zero & (level >= chi2_cdf(mu * mu, 1))
    if np.any(root):
        m, lv = mu[root], level[root]
        lo, hi = m * m, q_chi[root]
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = cdf_1d_constrained(m, mid) < lv
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= tol * (1.0 + hi)):
                break
        out[root] = hi
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# diagnostics

@dataclass(frozen=True, eq=False)
class DominanceResult:
    """Pointwise comparison of a sample CDF with a chi-square reference.

    ``delta_cdf`` is ``F_sample(c) - F_ref(c)``; a value below
    ``-3 sigma`` means the sample puts too much mass above ``c``.
    """

    c: np.ndarray
    delta_cdf: np.ndarray
    sigma: np.ndarray
    verdict: str
    violations: np.ndarray
    df: int
    n: int

    @property
    def dominated(self) -> bool:
        return self.verdict == "Dominated"

    def failing_levels(self) -> np.ndarray:
        """Confidence levels ``chi2_df(c)`` at the violating ``c`` values."""
        return np.asarray(chi2_cdf(self.violations, self.df))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["c", "delta_cdf", "sigma"])
        for row in zip(self.c, self.delta_cdf, self.sigma):
            w.writerow([format(float(v), ".17g") for v in row])
        return buf.getvalue()


def dominance_diagnostic(sample: NullSample | EmpiricalSample, df: int = 1,
                         n_grid: int = 512, z: float = 3.0) -> DominanceResult:
    """Check whether the sampled statistic is dominated by ``chi2_df``.

    The grid is ``n_grid`` log-spaced points on ``[1e-4, 1.05 max]``.  The
    band is pointwise, ``sigma = sqrt(F_ref (1 - F_ref) / n)`` floored at
    ``1 / n`` to respect the resolution of an empirical CDF.
    """
    s = sample.draws if isinstance(sample, NullSample) else sample
    if s.n < 10_000:
        raise ValueError("sample too small: dominance diagnostics need n >= 10000")
    top = max(1.05 * float(s.values[-1]), 2e-4)
    c = np.geomspace(1e-4, top, n_grid)
    f_ref = np.asarray(chi2_cdf(c, df))
    delta = s.cdf(c) - f_ref
    sigma = np.maximum(np.sqrt(f_ref * (1.0 - f_ref) / s.n), 1.0 / s.n)
    bad = delta < -z * sigma
    verdict = "NotDominated" if np.any(bad) else "Dominated"
    return DominanceResult(c=c, delta_cdf=delta, sigma=sigma, verdict=verdict,
                           violations=c[bad], df=int(df), n=s.n)


def mean_estimate(sample: NullSample | EmpiricalSample) -> tuple[float, float]:
    """Sample mean and its standard error."""
    s = sample.draws if isinstance(sample, NullSample) else sample
    if s.n < 2:
        raise ValueError("need at least two draws")
    v = s.values
    return float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(s.n))
