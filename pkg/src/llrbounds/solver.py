"""Constrained least-squares engine.

Solves ``min ||y - K x||^2`` over a polyhedron ``X``, optionally restricted
to the hyperplane ``h @ x = mu``, with a primal active-set method.  The
equality is eliminated through a null-space basis, and steps are
minimum-norm least-squares solutions so a rank-deficient ``K`` is handled
without special casing.  When several minimizers exist, the one reached by
the active-set path is returned.

For ``K = I`` and axis-aligned bounds there is an exact vectorized path
(:func:`project_box`, :func:`project_box_slice`) used by the Monte Carlo
code.  :func:`brute_force_min` is an independent grid oracle for tests.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

from .model import ConstraintSet, ProblemInstance

__all__ = [
    "QpStatus",
    "QpSolution",
    "min_residual",
    "min_residual_on_slice",
    "brute_force_min",
    "project_box",
    "project_box_slice",
    "SOLVER_TOL",
]

SOLVER_TOL = 1e-9


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"


@dataclass(frozen=True, eq=False)
class QpSolution:
    """Result of a constrained least-squares solve.

    Attributes
    ----------
    x_hat : ndarray or None
        Minimizer; ``None`` when infeasible.
    objective : float
        ``||y - K x_hat||^2``; ``inf`` when infeasible.
    status : QpStatus
    kkt_residual : float
        Largest KKT violation (stationarity, primal feasibility, dual sign,
        complementarity) scaled by ``1 + ||K^T y||_inf``.
    iterations : int
    """

    x_hat: np.ndarray | None
    objective: float
    status: QpStatus
    kkt_residual: float = 0.0
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def _infeasible(iterations: int = 0) -> QpSolution:
    return QpSolution(None, math.inf, QpStatus.INFEASIBLE, math.inf, iterations)


# ---------------------------------------------------------------------------
# identity forward map with axis-aligned bounds

def project_box(Y, lower, upper) -> np.ndarray:
    """Euclidean projection of each row of ``Y`` onto the box."""
    return np.clip(np.asarray(Y, dtype=float), lower, upper)


def _slice_sum(Yz, hz, lz, uz, nu):
    # s(nu) = sum_i h_i clip(y_i - nu h_i, l_i, u_i); Yz (n,q), nu (n,L)
    Z = Yz[:, None, :] - nu[:, :, None] * hz
    np.clip(Z, lz, uz, out=Z)
    return Z @ hz


def project_box_slice(Y, h, mu, lower, upper, tol: float = SOLVER_TOL):
    """Project rows of ``Y`` onto ``{x in [lower, upper] : h @ x = mu}``.

    The projection is ``clip(y - nu h, lower, upper)`` where the scalar
    ``nu`` solves a monotone piecewise-linear equation; its breakpoints
    are enumerated, so the result is exact up to rounding.

    Parameters
    ----------
    Y : array_like, shape (n, p) or (p,)
    h : array_like, shape (p,)
    mu : float or array_like, shape (n,)
    lower, upper : array_like, shape (p,)
        Bounds, possibly infinite.

    Returns
    -------
    X : ndarray, shape (n, p)
        Projections; rows of an empty slice are NaN.
    feasible : ndarray of bool, shape (n,)
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, p = Y.shape
    h = np.asarray(h, dtype=float)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (p,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (p,))
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (n,))
    nz = h != 0
    X = np.clip(Y, lower, upper)
    feasible = np.ones(n, dtype=bool)
    if not np.any(nz):
        raise ValueError("h must be nonzero")
    hz, lz, uz = h[nz], lower[nz], upper[nz]
    q = hz.size
    nu_out = np.empty(n)
    rows = max(1, int(2_000_000 // ((2 * q + 4) * q)))
    for start in range(0, n, rows):
        sl = slice(start, min(n, start + rows))
        Yz = Y[sl][:, nz]
        m_ = mu[sl]
        with np.errstate(invalid="ignore", divide="ignore"):
            B = np.concatenate([(Yz - lz) / hz, (Yz - uz) / hz], axis=1)
        B[~np.isfinite(B)] = np.nan
        has = np.any(~np.isnan(B), axis=1)
        bmin = np.where(has, np.nanmin(np.where(has[:, None], B, 0.0), axis=1), 0.0)
        bmax = np.where(has, np.nanmax(np.where(has[:, None], B, 0.0), axis=1), 0.0)
        B = np.where(np.isnan(B), bmax[:, None], B)
        P = np.sort(np.concatenate([(bmin - 1.0)[:, None], B, (bmax + 1.0)[:, None]], axis=1), axis=1)
        S = _slice_sum(Yz, hz, lz, uz, P)
        # tails are linear beyond the outermost breakpoints
        tails = _slice_sum(Yz, hz, lz, uz, np.stack([bmin - 2.0, bmax + 2.0], axis=1))
        slope_lo = S[:, 0] - tails[:, 0]
        slope_hi = tails[:, 1] - S[:, -1]
        nu = np.empty(sl.stop - sl.start)
        ok = np.ones_like(nu, dtype=bool)
        tol_mu = tol * (1.0 + np.abs(m_))

        above = m_ > S[:, 0]
        below = m_ < S[:, -1]
        inside = ~(above | below)

        # inside: last j with S[j] >= mu, interpolate on [P_j, P_{j+1}]
        if np.any(inside):
            Si, Pi, mi = S[inside], P[inside], m_[inside]
            j = np.clip(np.sum(Si >= mi[:, None], axis=1) - 1, 0, Si.shape[1] - 2)
            r = np.arange(Si.shape[0])
            s0, s1 = Si[r, j], Si[r, j + 1]
            p0, p1 = Pi[r, j], Pi[r, j + 1]
            drop = s0 - s1
            with np.errstate(invalid="ignore", divide="ignore"):
                frac = np.where(drop > 0, (s0 - mi) / drop, 0.0)
            nu[inside] = p0 + np.clip(frac, 0.0, 1.0) * (p1 - p0)

        for mask, anchor, slope, sval in (
            (above, P[:, 0], slope_lo, S[:, 0]),
            (below, P[:, -1], slope_hi, S[:, -1]),
        ):
            if not np.any(mask):
                continue
            gap = m_[mask] - sval[mask]
            sl_ = slope[mask]
            with np.errstate(invalid="ignore", divide="ignore"):
                step = np.where(sl_ < 0, gap / sl_, 0.0)
            nu[mask] = anchor[mask] + step
            ok[mask] = (sl_ < 0) | (np.abs(gap) <= tol_mu[mask])
        nu_out[sl] = nu
        feasible[sl] = ok

    Xz = np.clip(Y[:, nz] - nu_out[:, None] * hz, lz, uz)
    X[:, nz] = Xz
    X[~feasible] = np.nan
    return X, feasible


# ---------------------------------------------------------------------------
# generic active-set method

def _start_point(cs: ConstraintSet, h: np.ndarray | None, mu: float | None) -> np.ndarray | None:
    p = cs.dim
    if cs.is_box:
        lo, hi = cs.bounds()
        if h is None:
            return np.clip(np.zeros(p), lo, hi)
        X, ok = project_box_slice(np.zeros((1, p)), h, mu, lo, hi)
        return X[0] if ok[0] else None
    kwargs = {}
    if h is not None:
        kwargs = dict(A_eq=h.reshape(1, -1), b_eq=[mu])
    res = linprog(np.zeros(p), A_ub=cs.A, b_ub=cs.b, bounds=[(None, None)] * p,
                  method="highs", **kwargs)
    if res.status != 0:
        return None
    return np.asarray(res.x, dtype=float)


def _multipliers(C: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, float]:
    if C.shape[0] == 0:
        return np.zeros(0), float(np.max(np.abs(grad), initial=0.0))
    lam = np.linalg.lstsq(C.T, -grad, rcond=None)[0]
    stat = float(np.max(np.abs(grad + C.T @ lam), initial=0.0))
    return lam, stat


def _active_set(K, y, A, b, heq, mu, x0, tol, max_iter):
    p = K.shape[1]
    x = x0.copy()
    W: list[int] = []
    neq = 0 if heq is None else 1
    scale = 1.0 + float(np.max(np.abs(K.T @ y), initial=0.0))
    Eq = np.zeros((0, p)) if heq is None else heq.reshape(1, -1)
    it = 0
    while it < max_iter:
        it += 1
        C = np.vstack([Eq, A[W]]) if W else Eq
        Z = null_space(C) if C.shape[0] else np.eye(p)
        r = y - K @ x
        if Z.shape[1]:
            d = np.linalg.lstsq(K @ Z, r, rcond=None)[0]
            step = Z @ d
        else:
            step = np.zeros(p)
        if np.linalg.norm(step) <= tol * (1.0 + np.linalg.norm(x)):
            grad = K.T @ (K @ x - y)
            lam, _ = _multipliers(C, grad)
            ineq = lam[neq:]
            if not W or np.min(ineq) >= -tol * scale:
                return x, QpStatus.OPTIMAL, it, W
            W.pop(int(np.argmin(ineq)))
            continue
        Ap = A @ step
        slack = np.maximum(b - A @ x, 0.0)
        alpha, block = 1.0, -1
        for i in np.flatnonzero(Ap > 1e-14 * (1.0 + np.linalg.norm(step))):
            if i in W:
                continue
            a_i = slack[i] / Ap[i]
            if a_i < alpha:
                alpha, block = a_i, int(i)
        x = x + alpha * step
        if block >= 0:
            W.append(block)
    return x, QpStatus.ITERATION_LIMIT, it, W


def _kkt_residual(K, y, A, b, heq, x, W) -> float:
    grad = K.T @ (K @ x - y)
    scale = 1.0 + float(np.max(np.abs(K.T @ y), initial=0.0))
    Eq = np.zeros((0, x.size)) if heq is None else heq.reshape(1, -1)
    C = np.vstack([Eq, A[W]]) if W else Eq
    lam, stat = _multipliers(C, grad)
    dual = float(max(0.0, -np.min(lam[Eq.shape[0]:], initial=0.0)))
    viol = A @ x - b if A.shape[0] else np.zeros(0)
    primal = float(np.max(viol, initial=0.0))
    comp = float(np.max(np.abs(viol[W]), initial=0.0)) if W else 0.0
    return max(stat, dual, primal, comp) / scale


def _solve(inst: ProblemInstance, y, mu: float | None, tol: float, max_iter: int | None) -> QpSolution:
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != inst.m:
        raise ValueError(f"observation has length {y.shape[0]}, expected {inst.m}")
    cs = inst.constraints
    h = None
    if mu is not None:
        mu = float(mu)
        lo, hi = inst.functional_range()
        if math.isnan(lo):
            return _infeasible()
        if mu < lo - tol * (1 + abs(lo)) or mu > hi + tol * (1 + abs(hi)):
            return _infeasible()
        mu = min(max(mu, lo), hi)
        h = inst.h
    lin = cs.as_linear_inequalities()
    A, b = np.asarray(lin.A), np.asarray(lin.b)
    x0 = _start_point(cs, h, mu)
    if x0 is None:
        return _infeasible()
    cap = max_iter if max_iter is not None else 100 * (inst.p + A.shape[0])
    x, status, it, W = _active_set(inst.K, y, A, b, h, mu, x0, tol, max(cap, 1))
    if cs.is_box:
        lo_b, hi_b = cs.bounds()
        x = np.clip(x, lo_b, hi_b)
    obj = float(np.sum((y - inst.K @ x) ** 2))
    kkt = _kkt_residual(inst.K, y, A, b, h, x, W)
    return QpSolution(x, obj, status, kkt, it)


def min_residual(inst: ProblemInstance, y, tol: float = SOLVER_TOL,
                 max_iter: int | None = None) -> QpSolution:
    """Global minimizer of ``||y - K x||^2`` over the constraint set."""
    return _solve(inst, y, None, tol, max_iter)


def min_residual_on_slice(inst: ProblemInstance, y, mu: float, tol: float = SOLVER_TOL,
                          max_iter: int | None = None) -> QpSolution:
    """Global minimizer of ``||y - K x||^2`` over ``X`` intersected with ``h @ x = mu``.

    A slice that touches ``X`` only at a boundary point of the functional
    range is feasible; ``mu`` strictly outside the range is reported as
    infeasible.
    """
    return _solve(inst, y, mu, tol, max_iter)


# ---------------------------------------------------------------------------
# grid oracle

def _rows_in_set(cs: ConstraintSet, X: np.ndarray, tol: float) -> np.ndarray:
    if cs.is_box:
        lo, hi = cs.bounds()
        return np.all((X >= lo - tol) & (X <= hi + tol), axis=1)
    return np.all(X @ cs.A.T <= cs.b + tol, axis=1)


def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    pts = np.arange(lo, hi + 0.5 * step, step)
    pts = pts[pts <= hi]
    if pts.size == 0 or pts[-1] < hi:
        pts = np.append(pts, hi)
    return pts


_MAX_RECENTRE = 50
_REFINE_HALF_WIDTH = 10


def _grid_pass(inst, y, mu, lower, upper, step, tol, chunk):
    p = inst.p
    h = inst.h
    if mu is None:
        free = list(range(p))
        j = None
    else:
        j = int(np.argmax(np.abs(h)))
        free = [i for i in range(p) if i != j]
    axes = [_axis(lower[i], upper[i], step) for i in free]
    best_obj, best_x = math.inf, None
    combos = itertools.product(*axes) if free else iter([()])
    while True:
        block = list(itertools.islice(combos, chunk))
        if not block:
            break
        F = np.array(block, dtype=float).reshape(len(block), len(free))
        X = np.empty((F.shape[0], p))
        if free:
            X[:, free] = F
        if j is not None:
            X[:, j] = (mu - F @ h[free]) / h[j]
            inside = (X[:, j] >= lower[j] - tol) & (X[:, j] <= upper[j] + tol)
        else:
            inside = np.ones(F.shape[0], dtype=bool)
        inside &= _rows_in_set(inst.constraints, X, tol)
        if not np.any(inside):
            continue
        Xf = X[inside]
        obj = np.sum((y - Xf @ inst.K.T) ** 2, axis=1)
        k = int(np.argmin(obj))
        if obj[k] < best_obj:
            best_obj, best_x = float(obj[k]), Xf[k].copy()
    return best_obj, best_x


def brute_force_min(inst: ProblemInstance, y, mu: float | None = None, *, lower, upper,
                    step: float, refine: int = 0, chunk: int = 200_000,
                    tol: float = SOLVER_TOL) -> QpSolution:
    """Exhaustive grid search, an oracle independent of the active-set code.

    Grid points lie in ``[lower, upper]`` and in ``X``.  With ``mu`` given,
    the coordinate with the largest ``|h_j|`` is solved from ``h @ x = mu``
    so every candidate lies exactly on the slice.  ``refine`` repeats the
    search with a tenfold finer step on a box of half-width ``10 * step``
    around the incumbent, re-centring until the incumbent stops improving;
    the solved coordinate keeps its full range.

    Only intended for ``p <= 4``.
    """
    if inst.p > 4:
        raise ValueError("brute_force_min supports p <= 4")
    y = np.asarray(y, dtype=float).ravel()
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (inst.p,)).copy()
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (inst.p,)).copy()
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))) or np.any(lower > upper):
        raise ValueError("a finite, nonempty grid box is required")
    obj, x = _grid_pass(inst, y, mu, lower, upper, step, tol, chunk)
    if x is None:
        return _infeasible()
    j = None if mu is None else int(np.argmax(np.abs(inst.h)))
    for _ in range(refine):
        width = _REFINE_HALF_WIDTH * step
        step /= 10.0
        # re-centre on the incumbent until it stops improving
        for _ in range(_MAX_RECENTRE):
            lo = np.maximum(lower, x - width)
            hi = np.minimum(upper, x + width)
            if j is not None:
                # the solved coordinate keeps its full range
                lo[j], hi[j] = lower[j], upper[j]
            o2, x2 = _grid_pass(inst, y, mu, lo, hi, step, tol, chunk)
            if x2 is None or o2 >= obj:
                break
            obj, x = o2, x2
    return QpSolution(x, obj, QpStatus.OPTIMAL, math.nan, 0)
