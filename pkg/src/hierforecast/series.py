"""Timestamp-indexed frames and deterministic feature engineering.

A SeriesFrame is an immutable view of one zone's target series plus its
covariates on a fixed half-hourly (or coarser) grid. All transforms here
are pure: they return new frames and never mutate shared state, so
per-zone work can run in parallel.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import DataError, NumericalError
from .splines import SplineBasis, sum_zero_basis

__all__ = [
    "SeriesFrame",
    "FrameView",
    "CalendarSpec",
    "TrendModel",
    "NormalizationTable",
    "make_frame",
    "add_calendar",
    "add_lags",
    "exp_smooth",
    "station_weighted_average",
    "fit_detrend",
    "apply_detrend",
    "trend_values",
    "fit_normalizer",
    "normalize",
    "denormalize",
]

_EPOCH = pd.Timestamp("2000-01-01")


@dataclass(frozen=True)
class SeriesFrame:
    """One zone's target + covariates on a strictly regular time grid."""

    data: pd.DataFrame
    target: str
    zone_id: str
    step: pd.Timedelta
    tz_label: str = "UTC"
    usable: np.ndarray = None
    periods: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = self.data.index
        if not isinstance(idx, pd.DatetimeIndex):
            raise DataError(f"zone {self.zone_id!r}: index must be datetimes")
        if len(idx) >= 2:
            deltas = np.diff(idx.asi8)
            if (deltas <= 0).any():
                raise DataError(f"zone {self.zone_id!r}: timestamps not strictly increasing")
            if (deltas != self.step.value).any():
                raise DataError(f"zone {self.zone_id!r}: timestamps not on a constant {self.step} grid")
        if self.target not in self.data.columns:
            raise DataError(f"zone {self.zone_id!r}: missing target column {self.target!r}")
        for name, col in self.data.items():
            if col.dtype == object:
                raise DataError(
                    f"zone {self.zone_id!r}: column {name!r} has no declared type; "
                    "declare it categorical or make it numeric"
                )
        if self.usable is None:
            object.__setattr__(self, "usable", np.ones(len(idx), dtype=bool))
        else:
            u = np.asarray(self.usable, dtype=bool)
            if u.shape != (len(idx),):
                raise DataError("usable mask length mismatch")
            object.__setattr__(self, "usable", u)

    def __len__(self) -> int:
        return len(self.data)

    @property
    def index(self) -> pd.DatetimeIndex:
        return self.data.index

    def instants(self) -> np.ndarray:
        """Instant-of-day (0..steps_per_day-1) for every row."""
        return instant_of(self.index, self.step)

    def steps_per_day(self) -> int:
        return int(pd.Timedelta(days=1) / self.step)

    def with_data(self, data: pd.DataFrame, **changes) -> "SeriesFrame":
        return replace(self, data=data, **changes)

    def with_columns(self, cols: dict, usable: np.ndarray | None = None, periods: dict | None = None) -> "SeriesFrame":
        data = self.data.copy()
        for name, values in cols.items():
            data[name] = values
        new_periods = dict(self.periods)
        if periods:
            new_periods.update(periods)
        return replace(
            self,
            data=data,
            usable=self.usable if usable is None else usable,
            periods=new_periods,
        )

    def window(self, start, end) -> "SeriesFrame":
        """Rows with start <= t < end (either bound may be None)."""
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.index >= pd.Timestamp(start)
        if end is not None:
            mask &= self.index < pd.Timestamp(end)
        return replace(self, data=self.data.loc[mask], usable=self.usable[mask])

    def target_values(self) -> np.ndarray:
        return self.data[self.target].to_numpy(dtype=float)


class FrameView:
    """Arbitrary row subset of a SeriesFrame for model (re)fits.

    Keeps the data, period declarations and usable mask, but not the
    fixed-step invariant: CV folds and per-instant slices are not
    contiguous in time.
    """

    def __init__(self, data: pd.DataFrame, periods: dict | None = None, usable: np.ndarray | None = None):
        self.data = data
        self.periods = dict(periods or {})
        self.usable = np.ones(len(data), dtype=bool) if usable is None else np.asarray(usable, dtype=bool)

    @classmethod
    def of(cls, frame: "SeriesFrame", mask) -> "FrameView":
        mask = np.asarray(mask, dtype=bool)
        return cls(frame.data.loc[mask], frame.periods, frame.usable[mask])


def make_frame(
    data: pd.DataFrame,
    target: str,
    zone_id: str,
    step: pd.Timedelta | None = None,
    tz_label: str = "UTC",
    categoricals: dict | None = None,
) -> SeriesFrame:
    """Build a SeriesFrame, inferring the step and declaring level sets.

    categoricals maps column name -> explicit level list (None to take the
    levels observed in the column).
    """
    data = data.copy()
    if categoricals:
        for name, levels in categoricals.items():
            observed = data[name]
            cats = levels if levels is not None else sorted(pd.unique(observed))
            data[name] = pd.Categorical(observed, categories=cats)
    if step is None:
        if len(data.index) < 2:
            raise DataError("cannot infer step from fewer than two rows")
        step = pd.Timedelta(data.index[1] - data.index[0])
    return SeriesFrame(data=data, target=target, zone_id=zone_id, step=step, tz_label=tz_label)


def instant_of(index: pd.DatetimeIndex, step: pd.Timedelta) -> np.ndarray:
    day_ns = (index.asi8 - index.normalize().asi8)
    return (day_ns // step.value).astype(np.int64)


# ---------------------------------------------------------------------------
# calendar covariates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalendarSpec:
    """Rules for the deterministic calendar covariates.

    DayType is ISO weekday 1..7; Instant counts steps from midnight;
    ToY is the elapsed fraction of the year in [0, 1). DLS follows the
    EU rule (last Sunday of March to last Sunday of October) computed
    arithmetically, with no timezone database involved.
    """

    holidays: frozenset = frozenset()
    dls_rule: str = "eu"
    long_weekend_rule: str = "bridge"

    def __post_init__(self):
        if self.dls_rule not in ("eu", "none"):
            raise ValueError(f"unknown dls_rule {self.dls_rule!r}")
        if self.long_weekend_rule not in ("bridge", "none"):
            raise ValueError(f"unknown long_weekend_rule {self.long_weekend_rule!r}")


def _last_sunday(year: int, month: int) -> dt.date:
    d = dt.date(year, month + 1, 1) - dt.timedelta(days=1) if month < 12 else dt.date(year, 12, 31)
    return d - dt.timedelta(days=(d.isoweekday() % 7))


def _dls_flag(dates: np.ndarray) -> np.ndarray:
    out = np.zeros(len(dates), dtype=np.int64)
    for year in {d.year for d in dates}:
        start, end = _last_sunday(year, 3), _last_sunday(year, 10)
        for i, d in enumerate(dates):
            if d.year == year and start <= d < end:
                out[i] = 1
    return out


def _long_weekend_flag(dates: np.ndarray, holidays: frozenset) -> dict:
    """Days inside a run of >= 3 consecutive non-working days.

    Non-working = Saturday, Sunday, or declared holiday; the run must be
    reachable only through a holiday, so plain weekends never flag.
    """
    uniq = sorted(set(dates))
    if not uniq:
        return {}
    span_start, span_end = uniq[0] - dt.timedelta(days=1), uniq[-1] + dt.timedelta(days=1)
    flagged = {}
    run: list = []
    d = span_start
    while d <= span_end:
        nonworking = d.isoweekday() >= 6 or d in holidays
        if nonworking:
            run.append(d)
        else:
            if len(run) >= 3:
                for r in run:
                    flagged[r] = True
            run = []
        d += dt.timedelta(days=1)
    if len(run) >= 3:
        for r in run:
            flagged[r] = True
    return flagged


def add_calendar(frame: SeriesFrame, spec: CalendarSpec) -> SeriesFrame:
    """Append DayType, Instant, ToY, Holiday, LongWeekEnd, DLS columns."""
    idx = frame.index
    steps_per_day = frame.steps_per_day()
    instant = instant_of(idx, frame.step)
    day_frac = (idx.asi8 - idx.normalize().asi8) / 86_400e9
    year_len = np.where(idx.is_leap_year, 366.0, 365.0)
    toy = (idx.dayofyear - 1 + day_frac) / year_len
    daytype = idx.dayofweek.to_numpy() + 1

    dates = np.array([t.date() for t in idx], dtype=object)
    holiday = np.array([1 if d in spec.holidays else 0 for d in dates], dtype=np.int64)
    if spec.long_weekend_rule == "bridge":
        flagged = _long_weekend_flag(dates, spec.holidays)
        lwe = np.array([1 if d in flagged else 0 for d in dates], dtype=np.int64)
    else:
        lwe = np.zeros(len(idx), dtype=np.int64)
    dls = _dls_flag(dates) if spec.dls_rule == "eu" else np.zeros(len(idx), dtype=np.int64)

    cols = {
        "DayType": pd.Categorical(daytype, categories=list(range(1, 8))),
        "Instant": instant,
        "ToY": toy,
        "Holiday": holiday,
        "LongWeekEnd": lwe,
        "DLS": dls,
    }
    return frame.with_columns(cols, periods={"Instant": float(steps_per_day), "ToY": 1.0})


# ---------------------------------------------------------------------------
# lags / smoothing / station averaging
# ---------------------------------------------------------------------------

def add_lags(frame: SeriesFrame, lags, column: str | None = None) -> SeriesFrame:
    """Add `<column>.<lag>` shifts of the target (or a named column).

    The first max(lag) rows keep their NA lag values and are flagged
    unusable instead of being dropped.
    """
    column = column or frame.target
    lags = [int(l) for l in lags]
    if any(l <= 0 for l in lags):
        raise ValueError("lags must be positive step counts (lag 0 would duplicate the column)")
    n = len(frame)
    if max(lags) >= n:
        raise DataError(f"insufficient history: lag {max(lags)} with only {n} rows")
    base = frame.data[column]
    cols = {f"{column}.{l}": base.shift(l) for l in lags}
    usable = frame.usable.copy()
    usable[: max(lags)] = False
    return frame.with_columns(cols, usable=usable)


def exp_smooth(series, alpha: float) -> np.ndarray:
    """EWMA with retention factor alpha: out[t] = a*out[t-1] + (1-a)*in[t]."""
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"smoothing factor must lie in (0,1), got {alpha}")
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("cannot smooth an empty series")
    if np.isnan(x).any():
        raise DataError("missing values in series to smooth")
    return pd.Series(x).ewm(alpha=1.0 - alpha, adjust=False).mean().to_numpy()


def station_weighted_average(stations, mode: str = "exp_dist") -> np.ndarray:
    """Convex combination of station series.

    mode="exp_dist": weights proportional to exp(-distance);
    mode="population": proportional to the supplied populations.
    """
    if not stations:
        raise ValueError("need at least one station")
    series = [np.asarray(s, dtype=float) for s, _ in stations]
    n = series[0].shape[0]
    if any(s.shape[0] != n for s in series):
        raise DataError("station series lengths differ")
    raw = np.array([float(w) for _, w in stations])
    if mode == "exp_dist":
        if (raw < 0).any():
            raise ValueError("distances must be >= 0")
        weights = np.exp(-raw)
    elif mode == "population":
        if (raw <= 0).any():
            raise ValueError("populations must be > 0")
        weights = raw
    else:
        raise ValueError(f"unknown mode {mode!r}")
    weights = weights / weights.sum()
    return sum(w * s for w, s in zip(weights, series))


# ---------------------------------------------------------------------------
# detrending
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrendModel:
    """Penalty-free cubic spline trend with 3 interior knots plus mean."""

    basis: SplineBasis
    coefs: np.ndarray
    centering: np.ndarray
    mean: float
    target: str


def _time_days(index: pd.DatetimeIndex) -> np.ndarray:
    return (index.asi8 - _EPOCH.value) / 86_400e9


def fit_detrend(frame: SeriesFrame, target: str | None = None) -> TrendModel:
    """Fit y = mu + s(t) with knots at time quantiles {0.25, 0.5, 0.75}."""
    target = target or frame.target
    if len(frame) < 10:
        raise DataError("detrend needs at least 10 observations")
    t = _time_days(frame.index)
    y = frame.data[target].to_numpy(dtype=float)
    knots = np.quantile(t, [0.25, 0.5, 0.75])
    basis = SplineBasis(lo=float(t.min()), hi=float(t.max()), interior=knots)
    B = basis.design(t)
    centering = B.mean(axis=0)
    Z = sum_zero_basis(basis.n_basis)
    Xc = (B - centering) @ Z
    gram = Xc.T @ Xc
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(f"detrend design is rank-deficient (condition number {cond:.3e})")
    gamma = np.linalg.solve(gram, Xc.T @ (y - y.mean()))
    return TrendModel(basis=basis, coefs=Z @ gamma, centering=centering, mean=float(y.mean()), target=target)


def trend_values(model: TrendModel, index: pd.DatetimeIndex) -> np.ndarray:
    """mu + s(t), linearly extended outside the fitted time span.

    Extension uses the chord slope of the outermost inter-knot segment
    rather than the pointwise boundary tangent: the tangent of an
    unpenalized cubic chases whatever short cycle ends at the boundary,
    while the chord averages it out.
    """
    t = _time_days(index)
    basis = model.basis
    inner = np.clip(t, basis.lo, basis.hi)
    B = basis.design(inner) - model.centering
    out = model.mean + B @ model.coefs

    below = t < basis.lo
    above = t > basis.hi
    if below.any() or above.any():
        def val(x):
            return model.mean + (basis.design(np.array([x])) - model.centering) @ model.coefs

        if above.any():
            left = basis.interior[-1] if basis.interior.size else basis.lo
            slope = (val(basis.hi) - val(left)) / (basis.hi - left)
            out[above] = val(basis.hi) + slope * (t[above] - basis.hi)
        if below.any():
            right = basis.interior[0] if basis.interior.size else basis.hi
            slope = (val(right) - val(basis.lo)) / (right - basis.lo)
            out[below] = val(basis.lo) + slope * (t[below] - basis.lo)
    return out


def apply_detrend(frame: SeriesFrame, model: TrendModel) -> SeriesFrame:
    """Add the detrended column `<target>_c` and make it the target."""
    resid = frame.data[model.target].to_numpy(dtype=float) - trend_values(model, frame.index)
    new = frame.with_columns({f"{model.target}_c": resid})
    return replace(new, target=f"{model.target}_c")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationTable:
    """Per (zone, instant) empirical means from a declared source window."""

    means: dict
    per_instant: bool

    def scale_for(self, zone_id: str, index: pd.DatetimeIndex, step: pd.Timedelta) -> np.ndarray:
        """Mean vector aligned with index (constant when not per-instant)."""
        if not self.per_instant:
            return np.full(len(index), self.means[(zone_id, None)])
        inst = instant_of(index, step)
        try:
            return np.array([self.means[(zone_id, int(i))] for i in inst])
        except KeyError as exc:
            raise DataError(f"no normalization mean for zone {zone_id!r}, instant {exc}") from exc

    def zone_mean(self, zone_id: str) -> float:
        """Average of the zone's per-instant means (the zone's overall level)."""
        vals = [m for (z, _), m in self.means.items() if z == zone_id]
        return float(np.mean(vals))


def fit_normalizer(frames, source_window, per_instant: bool = False) -> NormalizationTable:
    """Empirical target means per zone (optionally per instant) on the window.

    frames: iterable of SeriesFrame (or mapping zone -> frame).
    source_window: (start, end) with end exclusive.
    """
    if isinstance(frames, dict):
        frames = list(frames.values())
    start, end = source_window
    means = {}
    for frame in frames:
        src = frame.window(start, end)
        if len(src) == 0:
            raise DataError(f"zone {frame.zone_id!r}: empty normalization source window")
        y = src.target_values()
        if per_instant:
            inst = src.instants()
            for i in np.unique(inst):
                m = float(y[inst == i].mean())
                if m <= 0:
                    raise DataError(f"non-normalizable series: zone {frame.zone_id!r} instant {i} mean {m}")
                means[(frame.zone_id, int(i))] = m
        else:
            m = float(y.mean())
            if m <= 0:
                raise DataError(f"non-normalizable series: zone {frame.zone_id!r} mean {m}")
            means[(frame.zone_id, None)] = m
    return NormalizationTable(means=means, per_instant=per_instant)


def normalize(frame: SeriesFrame, table: NormalizationTable) -> SeriesFrame:
    scale = table.scale_for(frame.zone_id, frame.index, frame.step)
    data = frame.data.copy()
    data[frame.target] = data[frame.target].to_numpy(dtype=float) / scale
    return frame.with_data(data)


def denormalize(frame: SeriesFrame, table: NormalizationTable) -> SeriesFrame:
    scale = table.scale_for(frame.zone_id, frame.index, frame.step)
    data = frame.data.copy()
    data[frame.target] = data[frame.target].to_numpy(dtype=float) * scale
    return frame.with_data(data)
