"""Cubic B-spline bases with difference penalties.

Two basis flavours are provided: a clamped basis on an interval (with
linear tangent extension beyond the boundary knots, so downstream models
extrapolate along the boundary slope instead of the cubic polynomial),
and a periodic basis whose first and last segments wrap around a
declared period.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

DEGREE = 3  # cubic throughout


def quantile_knots(values: np.ndarray, k: int) -> tuple[np.ndarray, int]:
    """Interior knots at empirical quantiles for a k-function cubic basis.

    Returns (interior_knots, k_actual). k is reduced when the data do not
    carry enough distinct values to support k basis functions.
    """
    uniq = np.unique(values)
    k_max = uniq.size if uniq.size >= 4 else 0
    if k_max == 0:
        raise ValueError("constant covariate cannot support a spline basis")
    k_eff = min(k, k_max)
    n_interior = k_eff - DEGREE - 1
    if n_interior <= 0:
        return np.empty(0), max(k_eff, 4)
    probs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
    knots = np.quantile(uniq, probs)
    knots = np.unique(knots)
    # duplicated quantiles collapse the basis; shrink k to match
    return knots, knots.size + DEGREE + 1


@dataclass
class SplineBasis:
    """Clamped cubic B-spline basis on [lo, hi].

    Evaluation outside the boundary follows the tangent line of the
    boundary basis functions, never the cubic extension.
    """

    lo: float
    hi: float
    interior: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_data(cls, values: np.ndarray, k: int) -> "SplineBasis":
        values = np.asarray(values, dtype=float)
        lo, hi = float(values.min()), float(values.max())
        if hi <= lo:
            raise ValueError("degenerate covariate: single value")
        interior, _ = quantile_knots(values, k)
        interior = interior[(interior > lo) & (interior < hi)]
        return cls(lo=lo, hi=hi, interior=np.asarray(interior, dtype=float))

    @property
    def knots(self) -> np.ndarray:
        return np.r_[[self.lo] * (DEGREE + 1), self.interior, [self.hi] * (DEGREE + 1)]

    @property
    def n_basis(self) -> int:
        return self.interior.size + DEGREE + 1

    def _spline(self) -> BSpline:
        if "spl" not in self._cache:
            self._cache["spl"] = BSpline(self.knots, np.eye(self.n_basis), DEGREE)
        return self._cache["spl"]

    def _boundary_rows(self):
        if "bnd" not in self._cache:
            spl = self._spline()
            der = spl.derivative(1)
            ends = np.array([self.lo, self.hi])
            self._cache["bnd"] = (spl(ends), der(ends))
        return self._cache["bnd"]

    def design(self, x: np.ndarray) -> np.ndarray:
        """Design matrix, tangent-extended beyond [lo, hi]."""
        x = np.asarray(x, dtype=float)
        inside = np.clip(x, self.lo, self.hi)
        B = self._spline()(inside)
        below = x < self.lo
        above = x > self.hi
        if below.any() or above.any():
            rows, drows = self._boundary_rows()
            if below.any():
                B[below] = rows[0] + np.outer(x[below] - self.lo, drows[0])
            if above.any():
                B[above] = rows[1] + np.outer(x[above] - self.hi, drows[1])
        return B

    def penalty(self) -> np.ndarray:
        return difference_penalty(self.n_basis)

    def to_dict(self) -> dict:
        return {
            "kind": "clamped",
            "lo": self.lo,
            "hi": self.hi,
            "interior": self.interior.tolist(),
        }


@dataclass
class CyclicSplineBasis:
    """Periodic cubic B-spline basis with k wrapped functions.

    Knots are uniform over one period; evaluation maps x into the base
    period, so the basis row at x equals the row at x + period.
    """

    origin: float
    period: float
    k: int
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_data(cls, values: np.ndarray, k: int, period: float, origin: float | None = None) -> "CyclicSplineBasis":
        values = np.asarray(values, dtype=float)
        if origin is None:
            origin = float(values.min())
        if k < 4:
            raise ValueError("cyclic basis needs k >= 4")
        return cls(origin=origin, period=float(period), k=int(k))

    @property
    def n_basis(self) -> int:
        return self.k

    def _spline(self) -> BSpline:
        if "spl" not in self._cache:
            step = self.period / self.k
            base = self.origin + step * np.arange(self.k + 1)
            t = np.r_[base[-DEGREE - 1 : -1] - self.period, base, base[1 : DEGREE + 1] + self.period]
            self._cache["spl"] = BSpline(t, np.eye(self.k + DEGREE), DEGREE)
        return self._cache["spl"]

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        wrapped = self.origin + np.mod(x - self.origin, self.period)
        B = self._spline()(wrapped)
        folded = B[:, : self.k].copy()
        folded[:, :DEGREE] += B[:, self.k :]
        return folded

    def penalty(self) -> np.ndarray:
        return cyclic_difference_penalty(self.k)

    def to_dict(self) -> dict:
        return {"kind": "cyclic", "origin": self.origin, "period": self.period, "k": self.k}


def basis_from_dict(d: dict):
    if d["kind"] == "clamped":
        return SplineBasis(lo=d["lo"], hi=d["hi"], interior=np.asarray(d["interior"], dtype=float))
    if d["kind"] == "cyclic":
        return CyclicSplineBasis(origin=d["origin"], period=d["period"], k=d["k"])
    raise ValueError(f"unknown basis kind {d['kind']!r}")


def difference_penalty(k: int, order: int = 2) -> np.ndarray:
    """P-spline penalty DᵀD from order-th coefficient differences."""
    D = np.diff(np.eye(k), n=order, axis=0)
    return D.T @ D


def sum_zero_basis(k: int) -> np.ndarray:
    """Orthonormal basis of {v : sum(v) = 0}, via a Householder reflector.

    B-spline rows sum to one, so a column-centered block annihilates the
    all-ones coefficient direction; reparameterizing through this basis
    keeps fitted systems full rank.
    """
    u = np.full(k, 1.0 / np.sqrt(k))
    v = u - np.eye(k)[0]
    H = np.eye(k) - 2.0 * np.outer(v, v) / (v @ v)
    return H[:, 1:]


def cyclic_difference_penalty(k: int) -> np.ndarray:
    """Second-difference penalty wrapped around the period."""
    D = np.zeros((k, k))
    for i in range(k):
        D[i, i] = 1.0
        D[i, (i + 1) % k] = -2.0
        D[i, (i + 2) % k] = 1.0
    return D.T @ D
