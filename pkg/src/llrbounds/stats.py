"""Distribution primitives used throughout the package.

Subscripted cutoffs follow the upper-tail convention, e.g. ``z_alpha``
satisfies ``P(Z > z_alpha) = alpha``.  Quantile functions ``Q(p)`` are
lower-tail, so ``z_{alpha/2}**2 == chi2_quantile(1 - alpha, 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.stats import binom

__all__ = [
    "EmpiricalSample",
    "normal_cdf",
    "normal_pdf",
    "normal_quantile",
    "normal_upper_cutoff",
    "chi2_cdf",
    "chi2_quantile",
    "chi2_upper_cutoff",
    "empirical_quantile",
    "clopper_pearson",
    "quantile_order_stat_ci",
    "SampleTooSmallError",
]


class SampleTooSmallError(ValueError):
    """Raised when order-statistic indices for a requested confidence do not exist."""


def _check_prob(p, name="p"):
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise ValueError(f"{name} must lie strictly between 0 and 1")
    return arr


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def normal_cdf(z):
    """Standard normal CDF."""
    return _scalar_or_array(special.ndtr(np.asarray(z, dtype=float)))


def normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return _scalar_or_array(np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi))


def normal_quantile(p):
    """Inverse of :func:`normal_cdf` on ``(0, 1)``."""
    return _scalar_or_array(special.ndtri(_check_prob(p)))


def normal_upper_cutoff(alpha):
    """``z_alpha`` with ``P(Z > z_alpha) = alpha``."""
    return _scalar_or_array(-special.ndtri(_check_prob(alpha, "alpha")))


def _check_df(k):
    if isinstance(k, bool) or int(k) != k or k < 1:
        raise ValueError("degrees of freedom must be a positive integer")
    return int(k)


def chi2_cdf(c, k: int = 1):
    """Chi-square CDF with ``k`` degrees of freedom; zero for ``c <= 0``."""
    k = _check_df(k)
    c = np.asarray(c, dtype=float)
    out = special.gammainc(0.5 * k, 0.5 * np.maximum(c, 0.0))
    return _scalar_or_array(out)


def chi2_quantile(p, k: int = 1):
    """Lower-tail chi-square quantile ``Q_{chi2_k}(p)``."""
    k = _check_df(k)
    p = _check_prob(p)
    return _scalar_or_array(2.0 * special.gammaincinv(0.5 * k, p))


def chi2_upper_cutoff(alpha, k: int = 1):
    """``chi2_{k, alpha}``: exceeded with probability ``alpha``."""
    k = _check_df(k)
    alpha = _check_prob(alpha, "alpha")
    return _scalar_or_array(2.0 * special.gammainccinv(0.5 * k, alpha))


@dataclass(frozen=True, eq=False)
class EmpiricalSample:
    """Sorted Monte Carlo draws."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size < 1:
            raise ValueError("an empirical sample needs at least one value")
        if np.any(np.isnan(v)):
            raise ValueError("sample contains NaN")
        if np.any(v[1:] < v[:-1]):
            v = np.sort(v)
        else:
            v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_draws(cls, draws) -> "EmpiricalSample":
        return cls(np.sort(np.asarray(draws, dtype=float).ravel()))

    @property
    def n(self) -> int:
        return int(self.values.size)

    def cdf(self, c):
        """Right-continuous empirical CDF."""
        return np.searchsorted(self.values, np.asarray(c, dtype=float), side="right") / self.n

    def mean(self) -> float:
        return float(np.mean(self.values))


def _order_index(p: float, n: int) -> int:
    # ceil(p*n), guarded against products such as 0.95*20 = 19.000000000000004
    k = math.ceil(p * n - 1e-9)
    return min(max(k, 1), n)


def empirical_quantile(s: EmpiricalSample, p: float) -> float:
    """The ``ceil(p*n)``-th order statistic (1-based)."""
    _check_prob(p)
    return float(s.values[_order_index(float(p), s.n) - 1])


def clopper_pearson(k: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Exact equal-tailed binomial interval for ``k`` successes in ``n`` trials."""
    if n < 1 or not (0 <= k <= n):
        raise ValueError("require n >= 1 and 0 <= k <= n")
    _check_prob(alpha, "alpha")
    lo = 0.0 if k == 0 else float(special.betaincinv(k, n - k + 1, alpha / 2))
    hi = 1.0 if k == n else float(special.betaincinv(k + 1, n - k, 1 - alpha / 2))
    return lo, hi


def order_stat_ci_indices(n: int, p: float, conf: float) -> tuple[int, int]:
    """1-based indices ``(l, u)`` with ``P(X_(l) <= xi_p <= X_(u)) >= conf``.

    Each tail is allotted ``(1 - conf) / 2``.
    """
    _check_prob(p)
    _check_prob(conf, "conf")
    tail = 0.5 * (1.0 - conf)
    # B[j] = P(Bin(n, p) <= j), j = 0..n
    B = binom.cdf(np.arange(n + 1), n, p)
    # largest l with B(l-1) <= tail
    l_idx = int(np.searchsorted(B, tail, side="right"))
    # smallest u with B(u-1) >= 1 - tail
    u_idx = int(np.searchsorted(B, 1.0 - tail, side="left")) + 1
    if l_idx < 1 or u_idx > n:
        raise SampleTooSmallError(
            f"sample too small: n={n} cannot bracket the {p} quantile at confidence {conf}"
        )
    return l_idx, u_idx


def quantile_order_stat_ci(s: EmpiricalSample, p: float, conf: float = 0.95) -> tuple[float, float]:
    """Distribution-free confidence interval for the ``p`` quantile."""
    l_idx, u_idx = order_stat_ci_indices(s.n, p, conf)
    return float(s.values[l_idx - 1]), float(s.values[u_idx - 1])
