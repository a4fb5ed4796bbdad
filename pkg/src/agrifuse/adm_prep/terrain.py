"""Terrain derivatives: depression filling, slope/aspect, curvature, TWI."""

from __future__ import annotations

import heapq
import math
from typing import Tuple

import numpy as np

from ..grid import Raster

TERRAIN_BANDS = ("aspect", "curvature", "dem", "slope", "twi")
MIN_TAN_SLOPE = 0.001

# N, NE, E, SE, S, SW, W, NW as (drow, dcol); row grows southward
D8_OFFSETS: Tuple[Tuple[int, int], ...] = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
OUTLET = -1


def _single_band(dem: Raster) -> Tuple[np.ndarray, np.ndarray]:
    if dem.n_bands != 1:
        raise ValueError(f"expected a single-band DEM, got {dem.n_bands} bands")
    return dem.values[0].astype(np.float64), dem.nodata_mask[0]


def _boundary(nodata: np.ndarray) -> np.ndarray:
    """Valid cells on the raster edge or next to a nodata cell."""
    rows, cols = nodata.shape
    padded = np.pad(nodata, 1, constant_values=True)
    near = np.zeros_like(nodata)
    for dr, dc in D8_OFFSETS:
        near |= padded[1 + dr : 1 + dr + rows, 1 + dc : 1 + dc + cols]
    return near & ~nodata


def fill_depressions(dem: Raster) -> Raster:
    """Priority-flood fill: raise pits to their spill elevation."""
    z, nodata = _single_band(dem)
    rows, cols = z.shape
    filled = z.copy()
    closed = nodata.copy()
    heap = []
    counter = 0
    for r, c in zip(*np.nonzero(_boundary(nodata))):
        heap.append((filled[r, c], counter, int(r), int(c)))
        counter += 1
        closed[r, c] = True
    heapq.heapify(heap)
    while heap:
        elev, _, r, c = heapq.heappop(heap)
        for dr, dc in D8_OFFSETS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < rows and 0 <= nc < cols and not closed[nr, nc]:
                closed[nr, nc] = True
                if filled[nr, nc] < elev:
                    filled[nr, nc] = elev
                heapq.heappush(heap, (filled[nr, nc], counter, nr, nc))
                counter += 1
    return Raster(dem.grid, dem.band_names, filled.astype(np.float32)[None], nodata[None])


def _window(z: np.ndarray):
    """The nine shifted views a..i of every interior cell (row-major, north first)."""
    return (
        z[:-2, :-2], z[:-2, 1:-1], z[:-2, 2:],
        z[1:-1, :-2], z[1:-1, 1:-1], z[1:-1, 2:],
        z[2:, :-2], z[2:, 1:-1], z[2:, 2:],
    )


def _interior_nodata(nodata: np.ndarray) -> np.ndarray:
    """Edge cells and cells whose 3x3 window touches nodata."""
    out = np.ones_like(nodata)
    if nodata.shape[0] < 3 or nodata.shape[1] < 3:
        return out
    win = _window(nodata)
    out[1:-1, 1:-1] = np.logical_or.reduce(win)
    return out


def horn_slope_aspect(z: np.ndarray, cell: float) -> Tuple[np.ndarray, np.ndarray]:
    """Float64 Horn slope / aspect (degrees) of interior cells; edges are 0.

    Aspect is the steepest-descent direction clockwise from north, NaN on flat cells.
    """
    z = np.asarray(z, dtype=np.float64)
    slope = np.zeros_like(z)
    aspect = np.zeros_like(z)
    if z.shape[0] >= 3 and z.shape[1] >= 3:
        a, b, c, d, e, f, g, h, i = _window(z)
        p = ((c + 2 * f + i) - (a + 2 * d + g)) / (8 * cell)
        q = ((g + 2 * h + i) - (a + 2 * b + c)) / (8 * cell)
        slope[1:-1, 1:-1] = np.degrees(np.arctan(np.hypot(p, q)))
        # steepest descent points along (-p) east and (+q) north
        aspect[1:-1, 1:-1] = np.where((p == 0) & (q == 0), np.nan, np.mod(np.degrees(np.arctan2(-p, q)), 360.0))
    return slope, aspect


def slope_aspect(dem: Raster) -> Tuple[Raster, Raster]:
    """Horn slope and aspect rasters; flat cells have nodata aspect."""
    z, nodata = _single_band(dem)
    slope, aspect = horn_slope_aspect(z, dem.grid.cell_size)
    bad = _interior_nodata(nodata)
    flat = np.isnan(aspect)
    aspect[flat] = 0.0
    mk = lambda name, v, m: Raster(dem.grid, (name,), v.astype(np.float32)[None], m[None])
    return mk("slope", slope, bad), mk("aspect", aspect, bad | flat)


def curvature(dem: Raster) -> Raster:
    """Zevenbergen-Thorne general curvature ``-2 (D + E)`` in 1/m."""
    z, nodata = _single_band(dem)
    L = dem.grid.cell_size
    out = np.zeros_like(z)
    if z.shape[0] >= 3 and z.shape[1] >= 3:
        _, b, _, d, e, f, _, h, _ = _window(z)
        D = ((d + f) / 2.0 - e) / L**2
        E = ((b + h) / 2.0 - e) / L**2
        out[1:-1, 1:-1] = -2.0 * (D + E)
    return Raster(dem.grid, ("curvature",), out.astype(np.float32)[None], _interior_nodata(nodata)[None])


def d8_directions(filled_dem: Raster) -> np.ndarray:
    """Index into ``D8_OFFSETS`` per cell, ``OUTLET`` where flow leaves the raster.

    Cells with a strictly lower neighbour drain to the steepest one (first in
    N..NW order on ties). Boundary cells with no lower neighbour are outlets.
    Remaining flat cells are routed breadth-first towards already drained
    cells of equal elevation.
    """
    z, nodata = _single_band(filled_dem)
    rows, cols = z.shape
    cell = filled_dem.grid.cell_size
    dist = [cell * (math.sqrt(2.0) if dr and dc else 1.0) for dr, dc in D8_OFFSETS]
    direction = np.full(z.shape, -2, dtype=np.int64)  # -2 unresolved
    boundary = _boundary(nodata)

    padded = np.pad(z, 1, constant_values=np.inf)
    pad_nd = np.pad(nodata, 1, constant_values=True)
    best = np.zeros(z.shape)
    for k, (dr, dc) in enumerate(D8_OFFSETS):
        nb = padded[1 + dr : 1 + dr + rows, 1 + dc : 1 + dc + cols]
        nb_nd = pad_nd[1 + dr : 1 + dr + rows, 1 + dc : 1 + dc + cols]
        drop = np.where(nb_nd, -np.inf, (z - nb) / dist[k])
        better = drop > best
        direction[better] = k
        best = np.where(better, drop, best)
    direction[(direction == -2) & boundary] = OUTLET
    direction[nodata] = OUTLET

    while True:
        pending = np.argwhere(direction == -2)
        if pending.size == 0:
            break
        assigned = []
        for r, c in pending:
            for k, (dr, dc) in enumerate(D8_OFFSETS):
                nr, nc = r + dr, c + dc
                if 0 <= nr < rows and 0 <= nc < cols and not nodata[nr, nc] and direction[nr, nc] != -2 and z[nr, nc] == z[r, c]:
                    assigned.append((r, c, k))
                    break
        if not assigned:
            raise RuntimeError(f"{len(pending)} cells cannot drain; was the DEM depression-filled?")
        for r, c, k in assigned:
            direction[r, c] = k
    return direction


def flow_accumulation(direction: np.ndarray, nodata: np.ndarray) -> np.ndarray:
    """Number of cells draining through each cell, itself included."""
    rows, cols = direction.shape
    target = np.full(rows * cols, -1, dtype=np.int64)
    for k, (dr, dc) in enumerate(D8_OFFSETS):
        rr, cc = np.nonzero((direction == k) & ~nodata)
        target[rr * cols + cc] = (rr + dr) * cols + (cc + dc)
    valid = ~nodata.ravel()
    count = valid.astype(np.int64)
    indeg = np.bincount(target[target >= 0], minlength=rows * cols)
    stack = [int(i) for i in np.nonzero((indeg == 0) & valid)[0]]
    visited = 0
    while stack:
        i = stack.pop()
        visited += 1
        t = target[i]
        if t >= 0:
            count[t] += count[i]
            indeg[t] -= 1
            if indeg[t] == 0:
                stack.append(int(t))
    if visited != int(valid.sum()):
        raise RuntimeError("cycle detected in D8 flow graph")
    return count.reshape(rows, cols)


def twi(filled_dem: Raster, slope_band: Raster) -> Raster:
    """Topographic wetness index ``ln(a / tan(slope))`` with D8 accumulation."""
    _, nodata = _single_band(filled_dem)
    cell = filled_dem.grid.cell_size
    direction = d8_directions(filled_dem)
    count = flow_accumulation(direction, nodata)
    area = count * cell * cell
    specific = area / cell
    tan_b = np.maximum(np.tan(np.radians(slope_band.values[0].astype(np.float64))), MIN_TAN_SLOPE)
    mask = nodata | slope_band.nodata_mask[0]
    out = np.where(mask, 0.0, np.log(np.where(mask, 1.0, specific) / tan_b))
    return Raster(filled_dem.grid, ("twi",), out.astype(np.float32)[None], mask[None])


def terrain_features(dem: Raster) -> Raster:
    """Five-band terrain stack on the DEM's own grid: aspect, curvature, dem, slope, twi."""
    slope, aspect = slope_aspect(dem)
    filled = fill_depressions(dem)
    filled_slope, _ = slope_aspect(filled)
    bands = [
        aspect,
        curvature(dem),
        Raster(dem.grid, ("dem",), dem.values, dem.nodata_mask),
        slope,
        twi(filled, filled_slope),
    ]
    return Raster.stack(bands)
