"""Constrained log-likelihood-ratio statistic.

For the Gaussian model the statistic is

    lambda(mu, y) = min_{x in X, h@x = mu} ||y - K x||^2 - min_{x in X} ||y - K x||^2,

a difference of two constrained least-squares objectives.  An empty slice
gives ``inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .model import ProblemInstance
from .solver import (
    QpStatus,
    min_residual,
    min_residual_on_slice,
    project_box,
    project_box_slice,
)

__all__ = [
    "FastPath",
    "LlrStatistic",
    "SolverFailure",
    "evaluate_1d_constrained",
    "evaluate_unconstrained_closed_form",
    "evaluate_2d_counterexample",
    "evaluate_3d_counterexample",
]


class SolverFailure(RuntimeError):
    """The inner solver hit its iteration cap."""


class FastPath(str, Enum):
    NONE = "none"
    ONE_DIM = "one_dim_constrained"
    UNCONSTRAINED = "unconstrained_full_rank"
    TWO_DIM = "two_dim_counterexample"
    THREE_DIM = "three_dim_counterexample"


def _rows(y, m: int) -> np.ndarray:
    Y = np.asarray(y, dtype=float)
    if Y.shape[-1] != m:
        raise ValueError(f"observation has length {Y.shape[-1]}, expected {m}")
    return Y


def evaluate_1d_constrained(mu, y):
    """``(y - mu)^2 - min(y, 0)^2`` for ``y ~ N(x, 1)``, ``x >= 0``; ``inf`` for ``mu < 0``."""
    mu = np.asarray(mu, dtype=float)
    y = np.asarray(y, dtype=float)
    neg = np.minimum(y, 0.0)
    lam = (y - mu) ** 2 - neg * neg
    out = np.where(mu < 0, np.inf, np.maximum(lam, 0.0))
    return float(out) if out.ndim == 0 else out


def _ls_parts(K: np.ndarray, h: np.ndarray):
    G = K.T @ K
    if np.linalg.matrix_rank(K) < K.shape[1]:
        raise np.linalg.LinAlgError("K^T K is singular; the closed form needs full column rank")
    w = np.linalg.solve(G, h)  # (K^T K)^{-1} h
    return w, float(h @ w)


def evaluate_unconstrained_closed_form(inst: ProblemInstance, mu, y):
    """``(h^T (K^T K)^{-1} K^T y - mu)^2 / h^T (K^T K)^{-1} h``.

    The constraint set of ``inst`` is ignored (treated as all of R^p).
    Accepts a single observation or rows of observations.
    """
    Y = _rows(y, inst.m)
    w, v = _ls_parts(inst.K, inst.h)
    est = Y @ (inst.K @ w)
    out = (est - np.asarray(mu, dtype=float)) ** 2 / v
    return float(out) if np.ndim(out) == 0 else out


def evaluate_2d_counterexample(y, mu0: float = 0.0):
    """Closed form for ``K = I_2``, ``h = (1, -1)``, ``x >= 0`` at ``mu = 0``."""
    if mu0 != 0:
        raise ValueError("the two-dimensional closed form only holds at mu = 0")
    Y = _rows(y, 2)
    y1, y2 = Y[..., 0], Y[..., 1]
    num = np.where(y1 + y2 < 0, y1 * y1 + y2 * y2, 0.5 * (y1 - y2) ** 2)
    sub = np.minimum(y1, 0.0) ** 2 + np.minimum(y2, 0.0) ** 2
    out = np.maximum(num - sub, 0.0)
    return float(out) if out.ndim == 0 else out


def _three_dim_numerator(y1, y2, z3):
    # min over u, v >= 0 of (y1-u)^2 + (y2-v)^2 + (z3+u+v)^2
    case1 = (y1 <= z3) & (y2 <= z3)
    case2 = ~case1 & (y1 - z3 >= 0) & (y1 - 2 * y2 + z3 >= 0)
    case3 = ~case1 & ~case2 & (y2 - z3 >= 0) & (y2 + z3 - 2 * y1 >= 0)
    return np.select(
        [case1, case2, case3],
        [
            y1 * y1 + y2 * y2 + z3 * z3,
            0.5 * (y1 * y1 + 2 * y1 * z3 + 2 * y2 * y2 + z3 * z3),
            0.5 * (2 * y1 * y1 + y2 * y2 + 2 * y2 * z3 + z3 * z3),
        ],
        default=(y1 + y2 + z3) ** 2 / 3.0,
    )


def evaluate_3d_counterexample(y, parts: bool = False):
    """Closed form for ``K = I_3``, ``h = (1, 1, -1)``, ``x >= 0`` at ``mu = -1``.

    On the slice ``x3 = x1 + x2 + 1``; with ``z3 = 1 - y3`` the numerator is
    a two-variable nonnegative least-squares problem solved by cases.

    Parameters
    ----------
    parts : bool
        Also return the slice minimum and the orthant minimum.
    """
    Y = _rows(y, 3)
    y1, y2, y3 = Y[..., 0], Y[..., 1], Y[..., 2]
    num = _three_dim_numerator(y1, y2, 1.0 - y3)
    sub = np.sum(np.minimum(Y, 0.0) ** 2, axis=-1)
    lam = np.maximum(num - sub, 0.0)
    if parts:
        return lam, num, sub
    return float(lam) if lam.ndim == 0 else lam


def _detect(inst: ProblemInstance) -> FastPath:
    cs = inst.constraints
    if inst.identity_forward and cs.kind == "nonneg":
        h = inst.h
        if inst.p == 1 and h[0] == 1.0:
            return FastPath.ONE_DIM
        if inst.p == 2 and np.array_equal(h, [1.0, -1.0]):
            return FastPath.TWO_DIM
        if inst.p == 3 and np.array_equal(h, [1.0, 1.0, -1.0]):
            return FastPath.THREE_DIM
    if cs.is_unconstrained and np.linalg.matrix_rank(inst.K) == inst.p:
        return FastPath.UNCONSTRAINED
    return FastPath.NONE


_PATH_MU = {FastPath.TWO_DIM: 0.0, FastPath.THREE_DIM: -1.0}


@dataclass(frozen=True, eq=False)
class LlrStatistic:
    """Evaluator of ``lambda(mu, y)`` for a problem instance.

    A closed-form fast path is attached automatically when the instance
    matches one exactly.  The counterexample paths only apply at their
    own ``mu``; elsewhere the generic route is used.  Batch methods work
    on rows of observations and use an exact vectorized projection when
    ``K = I`` with axis-aligned bounds.
    """

    inst: ProblemInstance
    fast_path: FastPath | None = None
    use_fast_path: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        detected = _detect(self.inst)
        if self.fast_path is None:
            object.__setattr__(self, "fast_path", detected)
        elif FastPath(self.fast_path) not in (FastPath.NONE, detected):
            raise ValueError(f"instance does not satisfy the {self.fast_path} preconditions")
        else:
            object.__setattr__(self, "fast_path", FastPath(self.fast_path))

    @property
    def vectorized(self) -> bool:
        """True when batch evaluation avoids the generic solver loop."""
        return (self.inst.identity_forward and self.inst.constraints.is_box) or (
            self.fast_path is FastPath.UNCONSTRAINED
        )

    @property
    def functional_range(self) -> tuple[float, float]:
        if "range" not in self._cache:
            self._cache["range"] = self.inst.functional_range()
        return self._cache["range"]

    def _ls(self):
        if "ls" not in self._cache:
            K = self.inst.K
            w, v = _ls_parts(K, self.inst.h)
            self._cache["ls"] = (np.linalg.pinv(K), K @ w, v)
        return self._cache["ls"]

    # single observation -------------------------------------------------
    def evaluate(self, mu: float, y) -> float:
        """``lambda(mu, y)``; ``inf`` when the slice is empty."""
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] != self.inst.m:
            raise ValueError(f"observation has length {y.shape[0]}, expected {self.inst.m}")
        fp = self.fast_path if self.use_fast_path else FastPath.NONE
        if fp is FastPath.ONE_DIM:
            return evaluate_1d_constrained(mu, y[0])
        if fp is FastPath.UNCONSTRAINED:
            return evaluate_unconstrained_closed_form(self.inst, mu, y)
        if fp is FastPath.TWO_DIM and mu == 0.0:
            return evaluate_2d_counterexample(y)
        if fp is FastPath.THREE_DIM and mu == -1.0:
            return evaluate_3d_counterexample(y)
        return self.evaluate_generic(mu, y)

    def evaluate_generic(self, mu: float, y) -> float:
        """Difference of two active-set solves, bypassing every fast path."""
        base = min_residual(self.inst, y)
        sl = min_residual_on_slice(self.inst, y, mu)
        for sol in (base, sl):
            if sol.status is QpStatus.ITERATION_LIMIT:
                raise SolverFailure("active-set iteration limit reached")
        if sl.status is QpStatus.INFEASIBLE:
            return math.inf
        return max(sl.objective - base.objective, 0.0)

    # batches ------------------------------------------------------------
    def base(self, Y) -> tuple[np.ndarray, np.ndarray]:
        """``s^2(y)`` and ``mu_hat = h @ x_hat`` for each row of ``Y``."""
        Y = np.atleast_2d(_rows(Y, self.inst.m))
        inst = self.inst
        if inst.identity_forward and inst.constraints.is_box:
            lo, hi = inst.constraints.bounds()
            X = project_box(Y, lo, hi)
            return np.sum((Y - X) ** 2, axis=1), X @ inst.h
        if self.fast_path is FastPath.UNCONSTRAINED:
            pinv = self._ls()[0]
            X = Y @ pinv.T
            return np.sum((Y - X @ inst.K.T) ** 2, axis=1), X @ inst.h
        s2 = np.empty(Y.shape[0])
        mh = np.empty(Y.shape[0])
        for i, y in enumerate(Y):
            sol = min_residual(inst, y)
            if not sol.ok:
                raise SolverFailure(f"base solve failed with status {sol.status.value}")
            s2[i], mh[i] = sol.objective, inst.h @ sol.x_hat
        return s2, mh

    def slice_objective(self, mu, Y) -> np.ndarray:
        """Slice minimum for each row; ``mu`` is a scalar or one value per row."""
        Y = np.atleast_2d(_rows(Y, self.inst.m))
        n = Y.shape[0]
        mu = np.broadcast_to(np.asarray(mu, dtype=float), (n,))
        inst = self.inst
        if inst.identity_forward and inst.constraints.is_box:
            lo, hi = inst.constraints.bounds()
            X, ok = project_box_slice(Y, inst.h, mu, lo, hi)
            out = np.full(n, np.inf)
            out[ok] = np.sum((Y[ok] - X[ok]) ** 2, axis=1)
            return out
        if self.fast_path is FastPath.UNCONSTRAINED:
            pinv, a, v = self._ls()
            X = Y @ pinv.T
            s2 = np.sum((Y - X @ inst.K.T) ** 2, axis=1)
            return s2 + (Y @ a - mu) ** 2 / v
        out = np.empty(n)
        for i in range(n):
            sol = min_residual_on_slice(inst, Y[i], mu[i])
            if sol.status is QpStatus.ITERATION_LIMIT:
                raise SolverFailure("slice solve hit the iteration limit")
            out[i] = sol.objective
        return out

    def evaluate_batch(self, mu, Y, s2: np.ndarray | None = None) -> np.ndarray:
        """``lambda(mu, y)`` for each row of ``Y``."""
        Y = np.atleast_2d(_rows(Y, self.inst.m))
        mu_arr = np.asarray(mu, dtype=float)
        fp = self.fast_path if self.use_fast_path else FastPath.NONE
        if fp is FastPath.ONE_DIM:
            return np.broadcast_to(evaluate_1d_constrained(mu_arr, Y[:, 0]), (Y.shape[0],)).copy()
        if fp in _PATH_MU and mu_arr.ndim == 0 and float(mu_arr) == _PATH_MU[fp]:
            f = evaluate_2d_counterexample if fp is FastPath.TWO_DIM else evaluate_3d_counterexample
            return np.atleast_1d(f(Y))
        if fp is FastPath.UNCONSTRAINED:
            return np.atleast_1d(evaluate_unconstrained_closed_form(self.inst, mu_arr, Y))
        if s2 is None:
            s2 = self.base(Y)[0]
        lam = self.slice_objective(mu_arr, Y) - s2
        return np.maximum(lam, 0.0)
