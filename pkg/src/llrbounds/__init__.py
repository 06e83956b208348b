"""Confidence intervals for linear functionals under constraints.

The model is ``y = K x + eps`` with ``eps ~ N(0, I)`` and ``x`` in a
polyhedral set.  Intervals for ``h @ x`` come from inverting the
constrained log-likelihood-ratio test with a decision rule ``q(mu)``.
"""

__version__ = "0.1.0"

from .model import ConstraintSet, ProblemInstance  # noqa: E402
from .llr import LlrStatistic  # noqa: E402
from .maxquantile import DecisionRule, max_quantile, max_quantile_per_mu  # noqa: E402
from .intervals import (  # noqa: E402
    IntervalResult,
    interval_functional_space,
    interval_mq,
    interval_mqmu,
    interval_osb,
    interval_ssb,
    interval_unconstrained_closed_form,
)

__all__ = [
    "__version__",
    "ConstraintSet",
    "ProblemInstance",
    "LlrStatistic",
    "DecisionRule",
    "max_quantile",
    "max_quantile_per_mu",
    "IntervalResult",
    "interval_functional_space",
    "interval_mq",
    "interval_mqmu",
    "interval_osb",
    "interval_ssb",
    "interval_unconstrained_closed_form",
]
