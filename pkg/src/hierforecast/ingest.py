"""CSV ingestion: timestamped series files and holiday calendars.

Series files: first column ISO-8601 timestamps, mandatory header row,
`.` decimal point. Categorical columns are declared by the caller (from
config), never guessed.
"""
from __future__ import annotations


import pandas as pd

from .errors import DataError
from .series import SeriesFrame, make_frame

__all__ = ["read_series_csv", "read_holidays_csv"]


def read_series_csv(
    path,
    target: str,
    zone_id: str,
    categoricals: dict | None = None,
    step=None,
    tz_label: str = "UTC",
) -> SeriesFrame:
    """Load one zone's series. categoricals maps column -> declared levels
    (None to use observed levels)."""
    try:
        raw = pd.read_csv(path, header=0)
    except FileNotFoundError as exc:
        raise DataError(f"missing data file {path}") from exc
    if raw.shape[1] < 2:
        raise DataError(f"{path}: need a timestamp column plus data columns")
    ts_col = raw.columns[0]
    try:
        pd.Timestamp(str(ts_col))
        raise DataError(f"{path}: first cell parses as a timestamp; header row is mandatory")
    except (ValueError, DataError) as exc:
        if isinstance(exc, DataError):
            raise
    try:
        idx = pd.DatetimeIndex(pd.to_datetime(raw[ts_col], format="ISO8601"))
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: first column must be ISO-8601 timestamps: {exc}") from exc
    data = raw.drop(columns=[ts_col])
    data.index = idx
    if target not in data.columns:
        raise DataError(f"{path}: missing target column {target!r}")
    if step is not None:
        step = pd.Timedelta(step)
    return make_frame(data, target=target, zone_id=zone_id, step=step, tz_label=tz_label,
                      categoricals=categoricals)


def read_holidays_csv(path) -> frozenset:
    """One date per row (first column), header mandatory."""
    try:
        raw = pd.read_csv(path, header=0)
    except FileNotFoundError as exc:
        raise DataError(f"missing holidays file {path}") from exc
    col = raw.columns[0]
    try:
        dates = pd.to_datetime(raw[col], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: holiday column must be ISO dates: {exc}") from exc
    return frozenset(d.date() for d in dates)
