"""Monthly best-scene selection for the two-year Sentinel-2 series."""

from __future__ import annotations

import calendar
import json
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .grid import Raster, SeasonWindow
from .io import read_fgr

S2_BANDS: Tuple[str, ...] = ("B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12")
VALID_BAND = "valid"
N_TIMESTEPS = 24
DEFAULT_MIN_SCORE = 0.3


class UnusableFieldError(ValueError):
    """Every timestep of a field ended up masked."""


@dataclass(frozen=True, eq=False)
class Scene:
    date: date
    bands: Raster
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.bands.band_names != S2_BANDS:
            raise ValueError(f"scene {self.date} must carry bands {S2_BANDS}, got {self.bands.band_names}")
        mask = np.asarray(self.valid_mask, dtype=bool)
        if mask.shape != self.bands.grid.shape:
            raise ValueError(f"valid_mask shape {mask.shape} != grid shape {self.bands.grid.shape}")
        mask = mask & ~self.bands.nodata_mask.any(axis=0)
        mask.setflags(write=False)
        object.__setattr__(self, "valid_mask", mask)

    @classmethod
    def from_raster(cls, when: date, raster: Raster) -> "Scene":
        """Split a 13-band scene raster (12 spectral + ``valid``)."""
        valid = (raster.band(VALID_BAND) == 1) & ~raster.band_mask(VALID_BAND)
        return cls(when, raster.select(S2_BANDS), valid)


@dataclass(frozen=True, eq=False)
class SceneSeries:
    intervals: Tuple[Tuple[int, int], ...]
    selected: Tuple[Optional[Scene], ...]
    timestep_mask: Tuple[bool, ...]

    @property
    def dates(self) -> List[Optional[date]]:
        return [s.date if (s is not None and m) else None for s, m in zip(self.selected, self.timestep_mask)]

    def to_dict(self) -> dict:
        return {
            "intervals": [f"{y:04d}-{m:02d}" for y, m in self.intervals],
            "selected_dates": [d.isoformat() if d else None for d in self.dates],
            "timestep_mask": list(self.timestep_mask),
        }


def build_intervals(harvest_date: date) -> List[Tuple[int, int]]:
    """The 24 calendar months of the year before harvest and the harvest year."""
    y0 = harvest_date.year - 1
    return [(y0 + i // 12, i % 12 + 1) for i in range(N_TIMESTEPS)]


def _month_bounds(interval: Tuple[int, int]) -> Tuple[date, date]:
    y, m = interval
    return date(y, m, 1), date(y, m, calendar.monthrange(y, m)[1])


def _midpoint_distance(d: date, interval: Tuple[int, int]) -> float:
    start, end = _month_bounds(interval)
    mid = start.toordinal() + (end.toordinal() - start.toordinal()) / 2.0
    return abs(d.toordinal() - mid)


def score_scene(scene: Scene, interval: Optional[Tuple[int, int]] = None) -> float:
    """Fraction of field pixels that are clear in ``scene``."""
    if interval is not None:
        start, end = _month_bounds(interval)
        if not start <= scene.date <= end:
            raise ValueError(f"scene {scene.date} lies outside interval {interval}")
    return float(scene.valid_mask.mean())


def _rank_key(scene: Scene, interval: Tuple[int, int]):
    # higher score, then nearer the month midpoint, then earlier date
    return (-score_scene(scene), _midpoint_distance(scene.date, interval), scene.date.toordinal())


def in_season(interval: Tuple[int, int], season: SeasonWindow) -> bool:
    start, end = _month_bounds(interval)
    return not (end < season.seeding_date or start > season.harvest_date)


def composite(
    scenes: Sequence[Scene], season: SeasonWindow, min_score: float = DEFAULT_MIN_SCORE
) -> SceneSeries:
    """Pick the best scene per month and mask months without one or outside the season."""
    intervals = build_intervals(season.harvest_date)
    first, _ = _month_bounds(intervals[0])
    _, last = _month_bounds(intervals[-1])
    buckets: List[List[Scene]] = [[] for _ in intervals]
    for s in scenes:
        if not first <= s.date <= last:
            raise ValueError(f"scene {s.date} outside the modelled window {first}..{last}")
        idx = (s.date.year - first.year) * 12 + s.date.month - 1
        buckets[idx].append(s)

    selected: List[Optional[Scene]] = []
    mask: List[bool] = []
    for interval, cands in zip(intervals, buckets):
        cands = [s for s in cands if score_scene(s) >= min_score]
        best = min(cands, key=lambda s: _rank_key(s, interval)) if cands else None
        usable = best is not None and in_season(interval, season)
        selected.append(best if usable else None)
        mask.append(usable)
    if not any(mask):
        raise UnusableFieldError(
            f"all {N_TIMESTEPS} timesteps masked for season {season.seeding_date}..{season.harvest_date}"
        )
    return SceneSeries(tuple(intervals), tuple(selected), tuple(mask))


# -- scene directory ---------------------------------------------------------

def scene_dir(root: Path, field_id: str) -> Path:
    return Path(root) / field_id / "s2"


def list_scene_dates(root: Path, field_id: str) -> List[date]:
    index = json.loads((scene_dir(root, field_id) / "scenes.json").read_text())
    return [date.fromisoformat(d) for d in index["dates"]]


def load_scene(root: Path, field_id: str, when: date) -> Scene:
    return Scene.from_raster(when, read_fgr(scene_dir(root, field_id) / f"{when.isoformat()}.fgr"))


def load_scenes(root: Path, field_id: str) -> List[Scene]:
    return [load_scene(root, field_id, d) for d in list_scene_dates(root, field_id)]


def series_from_dict(d: dict, root: Path, field_id: str) -> SceneSeries:
    """Rebuild a stored series, reloading only the selected scenes."""
    intervals = tuple(tuple(int(v) for v in s.split("-")) for s in d["intervals"])
    selected = tuple(
        load_scene(root, field_id, date.fromisoformat(s)) if s else None for s in d["selected_dates"]
    )
    return SceneSeries(intervals, selected, tuple(bool(m) for m in d["timestep_mask"]))
