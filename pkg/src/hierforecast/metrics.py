"""Losses and model analysis: MAPE, RMSE, pinball, ALE, LASSO selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError

__all__ = [
    "MetricReport",
    "AleCurve",
    "mape",
    "rmse",
    "pinball",
    "ale",
    "lasso_select",
    "lasso_coordinate_descent",
]


def _aligned(actual, forecast, usable=None):
    a = np.asarray(actual, dtype=float)
    f = np.asarray(forecast, dtype=float)
    if a.shape != f.shape:
        raise DataError(f"length mismatch: {a.shape} vs {f.shape}")
    if usable is not None:
        u = np.asarray(usable, dtype=bool)
        a, f = a[u], f[u]
    if a.size == 0:
        raise DataError("no usable rows to score")
    return a, f


def mape(actual, forecast, usable=None) -> float:
    """100 * mean|a - f| / |a|; zero actuals are a hard error."""
    a, f = _aligned(actual, forecast, usable)
    zero = a == 0
    if zero.any():
        if isinstance(actual, pd.Series):
            where = list(actual.index[np.asarray(actual) == 0][:5])
        else:
            where = list(np.nonzero(zero)[0][:5])
        raise DataError(f"MAPE undefined: zero actuals at {where}")
    return float(100.0 * np.mean(np.abs(a - f) / np.abs(a)))


def rmse(actual, forecast, usable=None) -> float:
    a, f = _aligned(actual, forecast, usable)
    return float(np.sqrt(np.mean((a - f) ** 2)))


def pinball(actual, forecast, q: float, usable=None) -> float:
    """Mean of q*(a-f)+ + (1-q)*(f-a)+."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0,1), got {q}")
    a, f = _aligned(actual, forecast, usable)
    d = a - f
    return float(np.mean(np.where(d >= 0, q * d, (q - 1.0) * d)))


@dataclass
class MetricReport:
    """Scores for one evaluation window."""

    window: str
    mape: float
    rmse: float
    pinball: dict = field(default_factory=dict)
    n_rows: int = 0

    def to_row(self) -> dict:
        row = {"window": self.window, "mape_pct": self.mape, "rmse": self.rmse, "n_rows": self.n_rows}
        for q, v in sorted(self.pinball.items()):
            row[f"pinball_q{q}"] = v
        return row


def score_window(actual, forecast, window: str, quantile_forecasts=None, usable=None) -> MetricReport:
    rep = MetricReport(
        window=window,
        mape=mape(actual, forecast, usable),
        rmse=rmse(actual, forecast, usable),
        n_rows=int(np.sum(usable) if usable is not None else np.size(actual)),
    )
    if quantile_forecasts:
        rep.pinball = {q: pinball(actual, qf, q, usable) for q, qf in quantile_forecasts.items()}
    return rep


# ---------------------------------------------------------------------------
# accumulated local effects
# ---------------------------------------------------------------------------

@dataclass
class AleCurve:
    """First-order ALE curve over quantile bins of one variable."""

    variable: str
    edges: np.ndarray
    effect: np.ndarray  # accumulated, centered; one value per bin upper edge
    counts: np.ndarray
    quantile_level: float | None = None

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"bin_center": self.bin_centers, "effect": self.effect, "n": self.counts})


def ale(forest, frame, variable: str, quantile_level: float | None = None, n_bins: int = 20) -> AleCurve:
    """Standard first-order ALE of a forest prediction.

    quantile_level=None uses the mean readout, otherwise the conditional
    quantile at that level. Bins follow empirical quantiles of the
    variable; the curve is centered so its bin-count-weighted mean is 0.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    df = (frame.data.loc[frame.usable] if hasattr(frame, "data") else frame).copy()
    if variable not in df.columns:
        raise DataError(f"unknown variable {variable!r}")
    x = df[variable].to_numpy(dtype=float)
    if np.unique(x).size < 2:
        raise DataError(f"variable {variable!r} is constant")
    edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1)))
    if edges.size < 3:
        raise DataError(f"variable {variable!r} has too few distinct values for {n_bins} bins")
    nb = edges.size - 1
    which = np.clip(np.searchsorted(edges, x, side="left") - 1, 0, nb - 1)

    if quantile_level is None:
        predict = forest.predict_mean
    else:
        predict = lambda d: forest.predict_quantile(d, quantile_level)

    local = np.zeros(nb)
    counts = np.zeros(nb, dtype=int)
    for b in range(nb):
        rows = df[which == b]
        counts[b] = len(rows)
        if counts[b] == 0:
            continue
        hi = rows.copy()
        hi[variable] = edges[b + 1]
        lo = rows.copy()
        lo[variable] = edges[b]
        local[b] = float(np.mean(predict(hi) - predict(lo)))
    accumulated = np.cumsum(local)
    center = float(np.sum(accumulated * counts) / counts.sum())
    return AleCurve(
        variable=variable,
        edges=edges,
        effect=accumulated - center,
        counts=counts,
        quantile_level=quantile_level,
    )


# ---------------------------------------------------------------------------
# LASSO selection
# ---------------------------------------------------------------------------

def lasso_coordinate_descent(X, y, lam, max_sweeps=500, tol=1e-10, beta0=None):
    """Cyclic coordinate descent for (1/2n)||y - Xb||^2 + lam*||b||_1.

    Columns of X must be standardized (zero mean, unit variance).
    """
    n, p = X.shape
    beta = np.zeros(p) if beta0 is None else beta0.copy()
    r = y - X @ beta
    col_sq = (X * X).sum(axis=0) / n
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            bj = beta[j]
            if bj != 0.0:
                r += bj * X[:, j]
            rho = float(X[:, j] @ r) / n
            bj_new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if bj_new != 0.0:
                r -= bj_new * X[:, j]
            beta[j] = bj_new
            max_delta = max(max_delta, abs(bj_new - bj))
        if max_delta < tol:
            break
    return beta


def _design_for_lasso(frame, target):
    df = frame.data.loc[frame.usable] if hasattr(frame, "data") else frame
    if target not in df.columns:
        raise DataError(f"missing target column {target!r}")
    y = df[target].to_numpy(dtype=float)
    cols, groups = [], []
    for name in df.columns:
        if name == target:
            continue
        col = df[name]
        if isinstance(col.dtype, pd.CategoricalDtype):
            onehot = pd.get_dummies(col)
            for lev in onehot.columns:
                cols.append(onehot[lev].to_numpy(dtype=float))
                groups.append(name)
        else:
            cols.append(col.to_numpy(dtype=float))
            groups.append(name)
    X = np.column_stack(cols)
    sd = X.std(axis=0)
    keep = sd > 0
    X = (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]
    groups = [g for g, k in zip(groups, keep) if k]
    return X, y - y.mean(), groups


def lasso_select(frame, target: str, n_wanted: int) -> set:
    """Variables whose LASSO coefficients survive at a penalty chosen by
    bisection so the active set has (as close as achievable) n_wanted
    members. A one-hot group counts as selected when any level is active.
    """
    if n_wanted <= 0:
        raise ValueError("n_wanted must be positive")
    X, y, groups = _design_for_lasso(frame, target)
    n = X.shape[0]
    n_vars = len(set(groups))
    if n_wanted >= n_vars:
        raise ValueError(f"n_wanted={n_wanted} must be < {n_vars} available variables")

    lam_max = float(np.max(np.abs(X.T @ y)) / n)

    def active_at(lam, beta0=None):
        beta = lasso_coordinate_descent(X, y, lam, beta0=beta0)
        names = {g for g, b in zip(groups, beta) if b != 0.0}
        return names, beta

    lo, hi = lam_max * 1e-4, lam_max  # lo: many actives, hi: none
    best = (None, np.inf)
    beta_warm = None
    for _ in range(60):
        mid = np.sqrt(lo * hi)
        names, beta_warm = active_at(mid, beta_warm)
        gap = abs(len(names) - n_wanted)
        if gap < best[1] or (gap == best[1] and best[0] is None):
            best = (names, gap)
        if len(names) == n_wanted:
            return names
        if len(names) > n_wanted:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-12:
            break
    return best[0]
