"""Daily weather summed between the selected scene dates."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta
from typing import List, Sequence

import numpy as np

from ..composite import N_TIMESTEPS, SceneSeries
from ..grid import SeasonWindow

WEATHER_FEATURES = ("tmin_c", "tmax_c", "tmean_c", "precip_mm")


class WeatherGapError(ValueError):
    """Daily records are missing inside a required aggregation range."""


@dataclass(frozen=True)
class WeatherDaily:
    date: date
    tmin_c: float
    tmax_c: float
    tmean_c: float
    precip_mm: float

    def __post_init__(self):
        if not self.tmin_c <= self.tmean_c <= self.tmax_c:
            raise ValueError(f"{self.date}: need tmin <= tmean <= tmax, got {self.tmin_c}, {self.tmean_c}, {self.tmax_c}")
        if self.precip_mm < 0:
            raise ValueError(f"{self.date}: negative precipitation {self.precip_mm}")


@dataclass(frozen=True, eq=False)
class WeatherAggregate:
    values: np.ndarray  # (24, 4) in WEATHER_FEATURES order
    coverage: np.ndarray  # (24,) bool
    mode: str = "sum"


def _ranges(series: SceneSeries, season: SeasonWindow):
    """Per unmasked timestep the half-open day range (start, end]."""
    out = []
    prev = season.seeding_date
    for d in series.dates:
        if d is None:
            out.append(None)
            continue
        # a scene picked before seeding in the seeding month contributes nothing
        start = max(prev, season.seeding_date)
        out.append((start, d))
        prev = max(prev, d)
    return out


def aggregate_weather(
    daily: Sequence[WeatherDaily], series: SceneSeries, season: SeasonWindow, mode: str = "sum"
) -> WeatherAggregate:
    """Aggregate each variable over ``(previous selected date, selected date]``.

    The first unmasked timestep starts after ``seeding_date``. ``mode="mean"``
    averages instead of summing.
    """
    if mode not in ("sum", "mean"):
        raise ValueError(f"mode must be 'sum' or 'mean', got {mode!r}")
    by_day = {w.date: w for w in daily}
    values = np.zeros((N_TIMESTEPS, len(WEATHER_FEATURES)), dtype=np.float64)
    coverage = np.zeros(N_TIMESTEPS, dtype=bool)
    for t, rng in enumerate(_ranges(series, season)):
        if rng is None:
            continue
        start, end = rng
        days: List[date] = []
        d = start + timedelta(days=1)
        while d <= end:
            days.append(d)
            d += timedelta(days=1)
        missing = [x for x in days if x not in by_day]
        if missing:
            raise WeatherGapError(
                f"timestep {t}: {len(missing)} daily records missing between {missing[0]} and {missing[-1]}"
            )
        if days:
            rows = np.array([[getattr(by_day[x], f) for f in WEATHER_FEATURES] for x in days])
            values[t] = rows.sum(axis=0) if mode == "sum" else rows.mean(axis=0)
        coverage[t] = True
    values.setflags(write=False)
    coverage.setflags(write=False)
    return WeatherAggregate(values, coverage, mode)
