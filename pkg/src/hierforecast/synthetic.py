"""Seeded hierarchical load generator for experiments and acceptance runs.

Each zone gets its own daily shape, weekday profile, temperature
response and level; the global series is the exact sum of the zones.
A shift schedule applies per-zone multiplicative level changes and
optional daily-pattern changes from a given day onward, standing in for
an abrupt demand change.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError
from .series import CalendarSpec, add_calendar, make_frame, station_weighted_average

__all__ = ["SyntheticSpec", "generate_synthetic"]


@dataclass(frozen=True)
class SyntheticSpec:
    zones: int = 4
    days: int = 60
    start: str = "2021-01-04"  # a Monday
    steps_per_day: int = 48
    zone_levels: tuple | None = None  # base MW per zone
    noise_sigma: float = 0.02  # relative noise scale
    seed: int = 0
    shift_day: int | None = None
    level_shifts: tuple | None = None  # per-zone multiplicative factor after the shift
    pattern_shifts: tuple | None = None  # per-zone daily-shape perturbation amplitude

    def __post_init__(self):
        if self.zones < 0:
            raise ConfigError("zones must be >= 0")
        if self.days < 2:
            raise ConfigError("days must be >= 2")
        if self.shift_day is not None and not 0 <= self.shift_day < self.days:
            raise ConfigError(f"shift_day {self.shift_day} outside 0..{self.days - 1}")
        for name in ("level_shifts", "pattern_shifts"):
            v = getattr(self, name)
            if v is not None and len(v) != self.zones:
                raise ConfigError(f"{name} must list one value per zone")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        for name in ("zone_levels", "level_shifts", "pattern_shifts"):
            if d.get(name) is not None:
                d[name] = tuple(d[name])
        return cls(**d)


def generate_synthetic(spec: SyntheticSpec):
    """Generate (zone frames, global frame); the global target is the
    exact float sum of the zone targets."""
    rng = np.random.default_rng(spec.seed)
    n = spec.days * spec.steps_per_day
    step = pd.Timedelta(days=1) / spec.steps_per_day
    idx = pd.date_range(spec.start, periods=n, freq=step)
    inst = (np.arange(n) % spec.steps_per_day) / spec.steps_per_day
    day_idx = np.arange(n) // spec.steps_per_day
    dow = idx.dayofweek.to_numpy()

    K = spec.zones
    levels = spec.zone_levels or tuple(80.0 + 40.0 * rng.random(K))
    shift_on = (
        np.zeros(n, dtype=bool)
        if spec.shift_day is None
        else day_idx >= spec.shift_day
    )

    zone_frames = {}
    zone_loads = []
    zone_temps = []
    # weather is regional: zones share the seasonal/diurnal phases up to
    # small offsets, so the weighted-average temperature stays informative
    season_phase = rng.uniform(0, 2 * np.pi)
    diurnal_phase = rng.uniform(0, 2 * np.pi)
    for z in range(K):
        phase = rng.uniform(0, 2 * np.pi)
        amp1 = rng.uniform(0.15, 0.3)
        amp2 = rng.uniform(0.03, 0.1)
        temp = (
            12.0
            + 6.0 * np.sin(2 * np.pi * day_idx / 30.0 + season_phase + rng.uniform(-0.25, 0.25))
            + 3.0 * np.sin(2 * np.pi * inst + diurnal_phase + rng.uniform(-0.25, 0.25))
            + rng.normal(0, 0.5, n)
        )
        shape = 1.0 + amp1 * np.sin(2 * np.pi * inst + phase) + amp2 * np.sin(4 * np.pi * inst)
        weekday = 1.0 - 0.08 * (dow >= 5) - 0.02 * (dow == 4)
        temp_effect = 0.0025 * (temp - 16.0) ** 2
        signal = levels[z] * (shape * weekday + temp_effect)
        if spec.level_shifts is not None:
            signal = signal * np.where(shift_on, spec.level_shifts[z], 1.0)
        if spec.pattern_shifts is not None and spec.pattern_shifts[z]:
            bend = spec.pattern_shifts[z] * np.sin(2 * np.pi * inst + phase + np.pi / 2)
            signal = signal * (1.0 + np.where(shift_on, bend, 0.0))
        load = signal + levels[z] * spec.noise_sigma * rng.standard_normal(n)
        zone_loads.append(load)
        zone_temps.append(temp)
        df = pd.DataFrame({"load": load, "temp": temp}, index=idx)
        frame = make_frame(df, "load", f"z{z + 1}", step=step)
        zone_frames[f"z{z + 1}"] = add_calendar(frame, CalendarSpec())

    if K > 0:
        global_load = np.vstack(zone_loads).sum(axis=0)
        global_temp = station_weighted_average(
            [(t, lv) for t, lv in zip(zone_temps, levels)], mode="population"
        )
    else:
        global_load = 100.0 + 10.0 * np.sin(2 * np.pi * inst) + rng.normal(0, 1.0, n)
        global_temp = 12.0 + np.zeros(n)
    gdf = pd.DataFrame({"load": global_load, "temp": global_temp}, index=idx)
    global_frame = add_calendar(make_frame(gdf, "load", "global", step=step), CalendarSpec())
    return zone_frames, global_frame
