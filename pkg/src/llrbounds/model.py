"""Gaussian linear forward model, constraint sets and functionals.

The canonical model is ``y = K x + eps`` with ``eps ~ N(0, I_m)``, a
parameter ``x`` restricted to a convex polyhedron ``X`` and a linear
functional ``phi(x) = h @ x`` of interest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "ConstraintSet",
    "ProblemInstance",
    "whiten",
    "whiten_observation",
    "instance_from_dict",
    "instance_to_dict",
    "load_instance",
    "save_instance",
    "load_observation",
    "parse_observation",
    "one_dim_model",
    "two_dim_counterexample",
    "three_dim_counterexample",
    "box_model",
    "dimension_family",
]

DEFAULT_TOL = 1e-9
_KINDS = ("nonneg", "box", "linear")


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def _frozen(arr: np.ndarray | None) -> np.ndarray | None:
    if arr is None:
        return None
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Convex polyhedral parameter set.

    Three variants are supported: the nonnegative orthant, an axis-aligned
    box whose bounds may be infinite, and general inequalities ``A x <= b``.
    Use the constructors :meth:`nonneg`, :meth:`box`, :meth:`linear` and
    :meth:`unconstrained` rather than the raw initializer.
    """

    kind: str
    dim: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("constraint dimension must be at least 1")
        if self.kind == "nonneg":
            object.__setattr__(self, "lower", _frozen(np.zeros(self.dim)))
            object.__setattr__(self, "upper", _frozen(np.full(self.dim, np.inf)))
        elif self.kind == "box":
            lo = _as_vector(self.lower, "lower")
            hi = _as_vector(self.upper, "upper")
            if lo.shape != (self.dim,) or hi.shape != (self.dim,):
                raise ValueError("box bounds must have length equal to the dimension")
            if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
                raise ValueError("box bounds must not be NaN")
            if np.any(lo > hi):
                raise ValueError("box requires lower <= upper componentwise")
            if np.any(lo == np.inf) or np.any(hi == -np.inf):
                raise ValueError("box bounds describe an empty set")
            object.__setattr__(self, "lower", _frozen(lo))
            object.__setattr__(self, "upper", _frozen(hi))
        else:
            A = np.atleast_2d(np.asarray(self.A, dtype=float))
            b = _as_vector(self.b, "b")
            if A.size == 0:
                A = np.zeros((0, self.dim))
            if A.shape[1] != self.dim:
                raise ValueError(f"A must have {self.dim} columns, got {A.shape[1]}")
            if A.shape[0] != b.shape[0]:
                raise ValueError("A and b have inconsistent row counts")
            if not np.all(np.isfinite(A)) or np.any(np.isnan(b)):
                raise ValueError("A must be finite and b must not be NaN")
            object.__setattr__(self, "A", _frozen(A))
            object.__setattr__(self, "b", _frozen(b))

    # constructors -----------------------------------------------------
    @classmethod
    def nonneg(cls, p: int) -> "ConstraintSet":
        return cls(kind="nonneg", dim=int(p))

    @classmethod
    def box(cls, lower, upper) -> "ConstraintSet":
        lo = _as_vector(lower, "lower")
        return cls(kind="box", dim=lo.shape[0], lower=lo, upper=upper)

    @classmethod
    def linear(cls, A, b) -> "ConstraintSet":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return cls(kind="linear", dim=A.shape[1], A=A, b=b)

    @classmethod
    def unconstrained(cls, p: int) -> "ConstraintSet":
        return cls.box(np.full(p, -np.inf), np.full(p, np.inf))

    # queries ----------------------------------------------------------
    @property
    def is_box(self) -> bool:
        """True for the orthant and box variants (axis-aligned bounds)."""
        return self.kind in ("nonneg", "box")

    @property
    def is_unconstrained(self) -> bool:
        return (
            self.is_box
            and bool(np.all(np.isneginf(self.lower)))
            and bool(np.all(np.isposinf(self.upper)))
        )

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Componentwise bounds; only defined for axis-aligned variants."""
        if not self.is_box:
            raise TypeError("bounds() is only defined for orthant and box sets")
        return np.array(self.lower), np.array(self.upper)

    def as_linear_inequalities(self) -> "ConstraintSet":
        """Exact conversion to the ``A x <= b`` form.

        Infinite bounds impose no restriction and produce no rows.
        """
        if self.kind == "linear":
            return self
        eye = np.eye(self.dim)
        rows, rhs = [], []
        for i in range(self.dim):
            if np.isfinite(self.upper[i]):
                rows.append(eye[i])
                rhs.append(self.upper[i])
            if np.isfinite(self.lower[i]):
                rows.append(-eye[i])
                rhs.append(-self.lower[i])
        A = np.array(rows).reshape(len(rows), self.dim)
        return ConstraintSet(kind="linear", dim=self.dim, A=A, b=np.array(rhs, dtype=float))

    def residuals(self, x) -> np.ndarray:
        """Constraint residuals; a point is feasible when all are <= 0."""
        x = _as_vector(x, "x")
        if x.shape[0] != self.dim:
            raise ValueError(f"dimension mismatch: expected {self.dim}, got {x.shape[0]}")
        if self.is_box:
            with np.errstate(invalid="ignore"):
                r = np.concatenate([self.lower - x, x - self.upper])
            return np.nan_to_num(r, nan=-np.inf, neginf=-np.inf)
        return self.A @ x - self.b

    def contains(self, x, tol: float = DEFAULT_TOL) -> bool:
        """Membership test with absolute tolerance ``tol``."""
        if tol < 0:
            raise ValueError("tol must be nonnegative")
        r = self.residuals(x)
        return bool(r.size == 0 or np.max(r) <= tol)

    def is_empty(self) -> bool:
        if self.is_box:
            return False
        res = linprog(np.zeros(self.dim), A_ub=self.A, b_ub=self.b,
                      bounds=[(None, None)] * self.dim, method="highs")
        return res.status == 2

    def functional_range(self, h) -> tuple[float, float]:
        """Exact range ``[min, max]`` of ``h @ x`` over the set.

        Returns ``(nan, nan)`` for an empty linear set.
        """
        h = _as_vector(h, "h")
        if h.shape[0] != self.dim:
            raise ValueError("h has the wrong length")
        if self.is_box:
            pos, neg = h > 0, h < 0
            lo = np.sum(h[pos] * self.lower[pos]) + np.sum(h[neg] * self.upper[neg])
            hi = np.sum(h[pos] * self.upper[pos]) + np.sum(h[neg] * self.lower[neg])
            return float(lo), float(hi)
        ends = []
        for sign in (1.0, -1.0):
            res = linprog(sign * h, A_ub=self.A, b_ub=self.b,
                          bounds=[(None, None)] * self.dim, method="highs")
            if res.status == 2:
                return math.nan, math.nan
            if res.status == 3:
                ends.append(-sign * math.inf)
            else:
                ends.append(sign * res.fun)
        return float(ends[0]), float(ends[1])

    def to_dict(self) -> dict:
        if self.kind == "nonneg":
            return {"type": "nonneg", "dim": self.dim}
        if self.kind == "box":
            return {"type": "box", "lower": _encode_floats(self.lower),
                    "upper": _encode_floats(self.upper)}
        return {"type": "linear", "A": [_encode_floats(r) for r in self.A],
                "b": _encode_floats(self.b)}


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Forward matrix, functional weights and constraint set.

    The noise covariance is the identity; see :func:`whiten` for correlated
    noise.
    """

    K: np.ndarray
    h: np.ndarray
    constraints: ConstraintSet = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim == 1:
            K = K.reshape(1, -1)
        if K.ndim != 2 or K.shape[0] < 1 or K.shape[1] < 1:
            raise ValueError(f"K must be a nonempty matrix, got shape {K.shape}")
        if not np.all(np.isfinite(K)):
            raise ValueError("K must be finite")
        h = _as_vector(self.h, "h")
        if h.shape[0] != K.shape[1]:
            raise ValueError(f"h has length {h.shape[0]} but K has {K.shape[1]} columns")
        if not np.any(h != 0):
            raise ValueError("h must be nonzero")
        cs = self.constraints if self.constraints is not None else ConstraintSet.nonneg(K.shape[1])
        if cs.dim != K.shape[1]:
            raise ValueError("constraint dimension does not match K")
        object.__setattr__(self, "K", _frozen(K))
        object.__setattr__(self, "h", _frozen(h))
        object.__setattr__(self, "constraints", cs)

    @property
    def m(self) -> int:
        return self.K.shape[0]

    @property
    def p(self) -> int:
        return self.K.shape[1]

    @property
    def identity_forward(self) -> bool:
        """True when ``K`` is the square identity matrix."""
        return self.m == self.p and bool(np.array_equal(self.K, np.eye(self.p)))

    def functional(self, x) -> float:
        return float(self.h @ self._check_x(x))

    def functional_range(self) -> tuple[float, float]:
        return self.constraints.functional_range(self.h)

    def forward_mean(self, x) -> np.ndarray:
        """Noise-free observation ``K x``."""
        return self.K @ self._check_x(x)

    def simulate(self, x, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw ``K x + eps``; shape ``(m,)`` or ``(size, m)``."""
        mean = self.forward_mean(x)
        shape = (self.m,) if size is None else (int(size), self.m)
        return mean + rng.standard_normal(shape)

    def _check_x(self, x) -> np.ndarray:
        x = _as_vector(x, "x")
        if x.shape[0] != self.p:
            raise ValueError(f"dimension mismatch: expected {self.p}, got {x.shape[0]}")
        return x


def whiten(K, h, constraints: ConstraintSet, cov) -> tuple[ProblemInstance, np.ndarray]:
    """Reduce correlated Gaussian noise to the identity-covariance model.

    With ``cov = L L^T`` (Cholesky), multiplying the observation by
    ``L^{-1}`` yields ``L^{-1} y = L^{-1} K x + e`` with ``e ~ N(0, I)``.

    Returns
    -------
    inst : ProblemInstance
        Instance with forward matrix ``L^{-1} K``.
    chol : ndarray
        Lower Cholesky factor, to be passed to :func:`whiten_observation`.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (K.shape[0], K.shape[0]):
        raise ValueError("covariance must be m x m")
    if not np.allclose(cov, cov.T):
        raise ValueError("covariance must be symmetric")
    chol = np.linalg.cholesky(cov)
    from scipy.linalg import solve_triangular

    Kw = solve_triangular(chol, K, lower=True)
    return ProblemInstance(Kw, h, constraints), chol


def whiten_observation(y, chol) -> np.ndarray:
    from scipy.linalg import solve_triangular

    return solve_triangular(np.asarray(chol, dtype=float), np.asarray(y, dtype=float), lower=True)


# ---------------------------------------------------------------------------
# presets

def one_dim_model() -> ProblemInstance:
    """Scalar mean observed once with unit noise, constrained to be >= 0."""
    return ProblemInstance(np.eye(1), [1.0], ConstraintSet.nonneg(1))


def two_dim_counterexample() -> ProblemInstance:
    return ProblemInstance(np.eye(2), [1.0, -1.0], ConstraintSet.nonneg(2))


def three_dim_counterexample() -> ProblemInstance:
    return ProblemInstance(np.eye(3), [1.0, 1.0, -1.0], ConstraintSet.nonneg(3))


def box_model() -> ProblemInstance:
    """Two coordinates in ``[0, 1]^2`` with the difference functional."""
    return ProblemInstance(np.eye(2), [1.0, -1.0], ConstraintSet.box([0.0, 0.0], [1.0, 1.0]))


def dimension_family(p: int) -> ProblemInstance:
    """``K = I_p`` on the orthant with ``h = (1, ..., 1, -1)``."""
    if p < 2:
        raise ValueError("p must be at least 2")
    h = np.ones(p)
    h[-1] = -1.0
    return ProblemInstance(np.eye(p), h, ConstraintSet.nonneg(p))


# ---------------------------------------------------------------------------
# serialization

def _encode_float(v: float):
    v = float(v)
    if v == math.inf:
        return "inf"
    if v == -math.inf:
        return "-inf"
    return v


def _encode_floats(arr) -> list:
    return [_encode_float(v) for v in np.asarray(arr, dtype=float).ravel()]


def _decode_floats(values, key: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in values], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"key {key!r}: expected an array of numbers ({exc})") from None


def instance_to_dict(inst: ProblemInstance) -> dict:
    return {
        "K": [_encode_floats(row) for row in inst.K],
        "h": _encode_floats(inst.h),
        "constraints": inst.constraints.to_dict(),
    }


def instance_from_dict(d: Mapping[str, Any]) -> ProblemInstance:
    """Build an instance from the JSON schema; errors name the offending key."""
    if not isinstance(d, Mapping):
        raise ValueError("model must be a JSON object")
    for key in ("K", "h", "constraints"):
        if key not in d:
            raise ValueError(f"missing key {key!r}")
    rows = d["K"]
    if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
        raise ValueError("key 'K': expected a nonempty array of rows")
    if len({len(r) for r in rows}) != 1:
        raise ValueError("key 'K': rows have unequal lengths")
    K = np.array([_decode_floats(r, "K") for r in rows])
    if not isinstance(d["h"], list):
        raise ValueError("key 'h': expected an array")
    h = _decode_floats(d["h"], "h")
    c = d["constraints"]
    if not isinstance(c, Mapping) or "type" not in c:
        raise ValueError("key 'constraints': expected an object with a 'type'")
    kind = c["type"]
    p = K.shape[1]
    if kind == "nonneg":
        cs = ConstraintSet.nonneg(p)
    elif kind == "box":
        for key in ("lower", "upper"):
            if key not in c:
                raise ValueError(f"key 'constraints.{key}' is required for a box")
        cs = ConstraintSet.box(_decode_floats(c["lower"], "constraints.lower"),
                               _decode_floats(c["upper"], "constraints.upper"))
    elif kind == "linear":
        for key in ("A", "b"):
            if key not in c:
                raise ValueError(f"key 'constraints.{key}' is required for linear constraints")
        A = np.array([_decode_floats(r, "constraints.A") for r in c["A"]]).reshape(-1, p)
        cs = ConstraintSet.linear(A, _decode_floats(c["b"], "constraints.b"))
    else:
        raise ValueError(f"key 'constraints.type': unknown value {kind!r}")
    try:
        return ProblemInstance(K, h, cs)
    except ValueError as exc:
        raise ValueError(f"key 'h' or 'constraints': {exc}") from None


def load_instance(path) -> ProblemInstance:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"model file is not valid JSON: {exc}") from None
    return instance_from_dict(data)


def save_instance(inst: ProblemInstance, path) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(inst), indent=2) + "\n", encoding="utf-8")


def parse_observation(text: str) -> np.ndarray:
    """Parse a JSON array, or numbers separated by newlines or commas."""
    text = text.strip()
    if not text:
        raise ValueError("observation is empty")
    if text.startswith("["):
        values = json.loads(text)
        if not isinstance(values, list):
            raise ValueError("observation JSON must be an array")
        return _decode_floats(values, "y")
    tokens = [t for t in text.replace(",", "\n").split() if t]
    return _decode_floats(tokens, "y")


def load_observation(source: str) -> np.ndarray:
    """Read an observation from a CSV/JSON file, or parse it inline."""
    path = Path(source)
    try:
        is_file = path.is_file()
    except OSError:
        is_file = False
    if is_file:
        return parse_observation(path.read_text(encoding="utf-8"))
    return parse_observation(source)
