"""Cleaning and rasterisation of combine-harvester yield points."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from datetime import datetime
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .grid import GeoGrid, Raster, world_to_cells

DEFAULT_CROP_BOUNDS: Dict[str, Tuple[float, float]] = {
    "wheat": (0.5, 20.0),
    "rapeseed": (0.5, 20.0),
    "soybean": (0.5, 20.0),
}
DEFAULT_MOISTURE_BOUNDS = (5.0, 40.0)
SIGMA_THRESHOLD = 3.0


@dataclass(frozen=True)
class YieldPointRecord:
    field_id: str
    farm_id: str
    crop: str
    x: float
    y: float
    timestamp: Optional[datetime]
    yield_t_ha: float
    moisture_pct: float
    harvester_active: bool


@dataclass
class CleanReport:
    """Points removed per rule; each point is claimed by the first rule it fails."""

    invalid_position: int = 0
    invalid_timestamp: int = 0
    invalid_yield_moisture: int = 0
    inactive_harvester: int = 0
    zero_yield: int = 0
    infeasible_yield: int = 0
    outlier_3sigma: int = 0
    retained: int = 0

    @property
    def removed(self) -> int:
        return self.total - self.retained

    @property
    def total(self) -> int:
        return sum(asdict(self).values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["removed"] = self.removed
        return d


def clean_yield_points(
    points: Sequence[YieldPointRecord],
    crop_bounds: Optional[Mapping[str, Tuple[float, float]]] = None,
    moisture_bounds: Tuple[float, float] = DEFAULT_MOISTURE_BOUNDS,
    grid: Optional[GeoGrid] = None,
    sigma: Optional[float] = SIGMA_THRESHOLD,
) -> Tuple[List[YieldPointRecord], CleanReport]:
    """Apply the cleaning rules in order and return survivors plus a report.

    Rules, first match wins:

    1. invalid record: non-finite or out-of-extent position (extent check only
       when ``grid`` is given), unparsable timestamp, non-finite yield/moisture
    2. harvester not active
    3. yield <= 0
    4. yield outside the crop's feasibility bounds (``infeasible_yield``) or
       moisture outside ``moisture_bounds`` (``invalid_yield_moisture``)
    5. |yield - mean| > sigma * std, mean/std taken once over the rule-4
       survivors (``sigma=None`` skips this rule)
    """
    crop_bounds = DEFAULT_CROP_BOUNDS if crop_bounds is None else crop_bounds
    report = CleanReport()
    if not points:
        return [], report
    field_ids = {p.field_id for p in points}
    if len(field_ids) != 1:
        raise ValueError(f"clean_yield_points expects one field, got {sorted(field_ids)}")

    inside = None
    if grid is not None:
        xs = np.array([p.x for p in points], dtype=np.float64)
        ys = np.array([p.y for p in points], dtype=np.float64)
        _, _, inside = world_to_cells(grid, xs, ys)

    mlo, mhi = moisture_bounds
    survivors: List[YieldPointRecord] = []
    for i, p in enumerate(points):
        if p.crop not in crop_bounds:
            raise KeyError(f"no feasibility bounds configured for crop {p.crop!r}")
        if not (math.isfinite(p.x) and math.isfinite(p.y)) or (inside is not None and not inside[i]):
            report.invalid_position += 1
        elif p.timestamp is None:
            report.invalid_timestamp += 1
        elif not (math.isfinite(p.yield_t_ha) and math.isfinite(p.moisture_pct)):
            report.invalid_yield_moisture += 1
        elif not p.harvester_active:
            report.inactive_harvester += 1
        elif p.yield_t_ha <= 0:
            report.zero_yield += 1
        elif not (crop_bounds[p.crop][0] <= p.yield_t_ha <= crop_bounds[p.crop][1]):
            report.infeasible_yield += 1
        elif not (mlo <= p.moisture_pct <= mhi):
            report.invalid_yield_moisture += 1
        else:
            survivors.append(p)

    if survivors and sigma is not None:
        y = np.array([p.yield_t_ha for p in survivors], dtype=np.float64)
        mean = y.mean()
        std = y.std()
        keep = np.abs(y - mean) <= sigma * std
        report.outlier_3sigma = int((~keep).sum())
        survivors = [p for p, k in zip(survivors, keep) if k]
    report.retained = len(survivors)
    return survivors, report


def rasterize_yield(
    points: Sequence[YieldPointRecord], grid: GeoGrid, aggregate: str = "mean"
) -> Raster:
    """Per-cell mean (or median) yield; cells without points are nodata."""
    if aggregate not in ("mean", "median"):
        raise ValueError(f"aggregate must be 'mean' or 'median', got {aggregate!r}")
    values = np.zeros(grid.shape, dtype=np.float64)
    empty = np.ones(grid.shape, dtype=bool)
    if points:
        xs = np.array([p.x for p in points], dtype=np.float64)
        ys = np.array([p.y for p in points], dtype=np.float64)
        yv = np.array([p.yield_t_ha for p in points], dtype=np.float64)
        cols, rows, inside = world_to_cells(grid, xs, ys)
        cols, rows, yv = cols[inside], rows[inside], yv[inside]
        if aggregate == "mean":
            sums = np.zeros(grid.shape, dtype=np.float64)
            counts = np.zeros(grid.shape, dtype=np.int64)
            # np.add.at accumulates in input order
            np.add.at(sums, (rows, cols), yv)
            np.add.at(counts, (rows, cols), 1)
            filled = counts > 0
            values[filled] = sums[filled] / counts[filled]
            empty = ~filled
        else:
            buckets: Dict[Tuple[int, int], list] = {}
            for r, c, v in zip(rows.tolist(), cols.tolist(), yv.tolist()):
                buckets.setdefault((r, c), []).append(v)
            for (r, c), vals in buckets.items():
                values[r, c] = float(np.median(vals))
                empty[r, c] = False
    return Raster(grid, ("yield_t_ha",), values.astype(np.float32)[None], empty[None])
