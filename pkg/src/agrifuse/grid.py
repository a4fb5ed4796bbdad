"""Grid geometry and the shared raster/field types."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date
from typing import Optional, Sequence, Tuple

import numpy as np

DEFAULT_CELL_SIZE = 10.0
NODATA = -9999.0


def _is_multiple(value: float, step: float) -> bool:
    q = value / step
    return abs(q - round(q)) < 1e-9


@dataclass(frozen=True)
class GeoGrid:
    """North-up planar raster frame.

    ``x_min``/``y_min`` is the south-west corner. Row 0 is the northernmost
    row. Source rasters (soil, DEM) use the same type with a coarser
    ``cell_size``.
    """

    crs_id: str
    x_min: float
    y_min: float
    cell_size: float
    cols: int
    rows: int

    def __post_init__(self):
        if self.cols < 1 or self.rows < 1:
            raise ValueError(f"grid needs cols, rows >= 1, got {self.cols}x{self.rows}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if not (_is_multiple(self.x_min, self.cell_size) and _is_multiple(self.y_min, self.cell_size)):
            raise ValueError(
                f"origin ({self.x_min}, {self.y_min}) is not aligned to cell size {self.cell_size}"
            )

    @property
    def x_max(self) -> float:
        return self.x_min + self.cols * self.cell_size

    @property
    def y_max(self) -> float:
        return self.y_min + self.rows * self.cell_size

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def bbox(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """World x of each column center and world y of each row center."""
        xs = self.x_min + (np.arange(self.cols) + 0.5) * self.cell_size
        ys = self.y_max - (np.arange(self.rows) + 0.5) * self.cell_size
        return xs, ys

    def to_dict(self) -> dict:
        return {
            "crs_id": self.crs_id,
            "x_min": self.x_min,
            "y_min": self.y_min,
            "cell_size": self.cell_size,
            "cols": self.cols,
            "rows": self.rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeoGrid":
        return cls(
            crs_id=str(d["crs_id"]),
            x_min=float(d["x_min"]),
            y_min=float(d["y_min"]),
            cell_size=float(d["cell_size"]),
            cols=int(d["cols"]),
            rows=int(d["rows"]),
        )


def snap_grid(bbox: Sequence[float], cell_size: float = DEFAULT_CELL_SIZE, crs_id: str = "LOCAL") -> GeoGrid:
    """Smallest cell-aligned grid covering ``bbox = (x_min, y_min, x_max, y_max)``."""
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not cell_size > 0:
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bbox {tuple(bbox)}: spans must be positive")
    gx0 = math.floor(x0 / cell_size) * cell_size
    gy0 = math.floor(y0 / cell_size) * cell_size
    cols = max(1, math.ceil((x1 - gx0) / cell_size - 1e-9))
    rows = max(1, math.ceil((y1 - gy0) / cell_size - 1e-9))
    return GeoGrid(crs_id, float(gx0), float(gy0), float(cell_size), int(cols), int(rows))


def world_to_cell(grid: GeoGrid, x: float, y: float) -> Optional[Tuple[int, int]]:
    """Map a world point to ``(col, row)``; ``None`` when outside the grid.

    Cells are half-open: [x_c, x_c + cell) horizontally and (y_c - cell, y_c]
    vertically, so a point on a cell's east edge belongs to the next column
    and a point on its north edge to the row above.
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        return None
    col = math.floor((x - grid.x_min) / grid.cell_size)
    row_from_south = math.floor((y - grid.y_min) / grid.cell_size)
    row = grid.rows - 1 - row_from_south
    if 0 <= col < grid.cols and 0 <= row < grid.rows:
        return col, row
    return None


def world_to_cells(grid: GeoGrid, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`world_to_cell`; returns ``(cols, rows, inside)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    finite = np.isfinite(x) & np.isfinite(y)
    with np.errstate(invalid="ignore"):
        col = np.floor((np.where(finite, x, grid.x_min) - grid.x_min) / grid.cell_size).astype(np.int64)
        rs = np.floor((np.where(finite, y, grid.y_min) - grid.y_min) / grid.cell_size).astype(np.int64)
    row = grid.rows - 1 - rs
    inside = finite & (col >= 0) & (col < grid.cols) & (row >= 0) & (row < grid.rows)
    return col, row, inside


@dataclass(frozen=True, eq=False)
class Raster:
    """Multi-band float32 raster, values shaped ``(bands, rows, cols)``."""

    grid: GeoGrid
    band_names: Tuple[str, ...]
    values: np.ndarray
    nodata_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 2:
            values = values[None]
        names = tuple(self.band_names)
        expected = (len(names), self.grid.rows, self.grid.cols)
        if values.shape != expected:
            raise ValueError(f"raster values shape {values.shape} != {expected}")
        mask = self.nodata_mask
        mask = np.zeros(expected, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(expected)
        mask = mask | ~np.isfinite(values) | (values == NODATA)
        values = values.copy()
        mask = mask.copy()
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "nodata_mask", mask)
        object.__setattr__(self, "band_names", names)

    @property
    def n_bands(self) -> int:
        return len(self.band_names)

    def band(self, name: str) -> np.ndarray:
        return self.values[self.band_names.index(name)]

    def band_mask(self, name: str) -> np.ndarray:
        return self.nodata_mask[self.band_names.index(name)]

    def select(self, names: Sequence[str]) -> "Raster":
        idx = [self.band_names.index(n) for n in names]
        return Raster(self.grid, tuple(names), self.values[idx], self.nodata_mask[idx])

    @staticmethod
    def stack(rasters: Sequence["Raster"]) -> "Raster":
        grid = rasters[0].grid
        for r in rasters[1:]:
            if r.grid != grid:
                raise ValueError("cannot stack rasters on different grids")
        names = tuple(n for r in rasters for n in r.band_names)
        return Raster(
            grid,
            names,
            np.concatenate([r.values for r in rasters]),
            np.concatenate([r.nodata_mask for r in rasters]),
        )


@dataclass(frozen=True)
class SeasonWindow:
    seeding_date: date
    harvest_date: date

    def __post_init__(self):
        if not self.seeding_date < self.harvest_date:
            raise ValueError(f"seeding {self.seeding_date} must precede harvest {self.harvest_date}")


@dataclass(frozen=True)
class FieldDescriptor:
    field_id: str
    farm_id: str
    crop: str
    season: SeasonWindow
    grid: GeoGrid

    def __post_init__(self):
        if not self.farm_id:
            raise ValueError(f"field {self.field_id!r} has an empty farm_id")

    def to_dict(self) -> dict:
        return {
            "field_id": self.field_id,
            "farm_id": self.farm_id,
            "crop": self.crop,
            "seeding_date": self.season.seeding_date.isoformat(),
            "harvest_date": self.season.harvest_date.isoformat(),
            "bbox": list(self.grid.bbox),
            "crs_id": self.grid.crs_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FieldDescriptor":
        season = SeasonWindow(date.fromisoformat(d["seeding_date"]), date.fromisoformat(d["harvest_date"]))
        grid = snap_grid(d["bbox"], DEFAULT_CELL_SIZE, d.get("crs_id", "LOCAL"))
        return cls(str(d["field_id"]), str(d["farm_id"]), str(d["crop"]), season, grid)
