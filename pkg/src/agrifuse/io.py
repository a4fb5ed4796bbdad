"""On-disk formats: FGR rasters and the tabular CSV inputs."""

from __future__ import annotations

import csv
import json
import math
import struct
from datetime import date, datetime
from pathlib import Path
from typing import Iterable, List, Tuple, Union

import numpy as np

from .grid import NODATA, GeoGrid, Raster

PathLike = Union[str, Path]

FGR_MAGIC = b"FGR1"


class FormatError(ValueError):
    """Raised when a file does not follow its documented layout."""


def _write_framed(path: PathLike, magic: bytes, header: dict, payload: bytes) -> None:
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def _read_framed(path: PathLike, magic: bytes) -> Tuple[dict, memoryview]:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    (n,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    return header, memoryview(data)[8 + n :]


def write_fgr(path: PathLike, raster: Raster) -> None:
    header = raster.grid.to_dict()
    header["nodata"] = NODATA
    header["band_names"] = list(raster.band_names)
    values = np.where(raster.nodata_mask, np.float32(NODATA), raster.values).astype("<f4")
    _write_framed(path, FGR_MAGIC, header, values.tobytes(order="C"))


def read_fgr(path: PathLike) -> Raster:
    header, payload = _read_framed(path, FGR_MAGIC)
    grid = GeoGrid.from_dict(header)
    names = tuple(header["band_names"])
    n = len(names) * grid.rows * grid.cols
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    values = np.frombuffer(payload, dtype="<f4").reshape(len(names), grid.rows, grid.cols).astype(np.float32)
    nodata = np.float32(header.get("nodata", NODATA))
    return Raster(grid, names, values, (values == nodata) | ~np.isfinite(values))


# -- yield CSV ---------------------------------------------------------------

YIELD_COLUMNS = ["field_id", "farm_id", "crop", "x", "y", "timestamp", "yield_t_ha", "moisture_pct", "harvester_active"]


def _float(text: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        return math.nan


def _timestamp(text: str):
    try:
        return datetime.fromisoformat(text)
    except (TypeError, ValueError):
        return None


def read_yield_csv(path: PathLike) -> list:
    """Read the canonical yield CSV; unparsable numbers become NaN and
    unparsable timestamps ``None`` so cleaning can count them."""
    from .yield_ingest import YieldPointRecord

    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(YIELD_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            out.append(
                YieldPointRecord(
                    field_id=row["field_id"],
                    farm_id=row["farm_id"],
                    crop=row["crop"],
                    x=_float(row["x"]),
                    y=_float(row["y"]),
                    timestamp=_timestamp(row["timestamp"]),
                    yield_t_ha=_float(row["yield_t_ha"]),
                    moisture_pct=_float(row["moisture_pct"]),
                    harvester_active=row["harvester_active"].strip() == "1",
                )
            )
    return out


def write_yield_csv(path: PathLike, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=YIELD_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- weather CSV -------------------------------------------------------------

WEATHER_COLUMNS = ["field_id", "date", "tmin_c", "tmax_c", "tmean_c", "precip_mm"]


def read_weather_csv(path: PathLike) -> dict:
    """Return ``{field_id: [WeatherDaily, ...]}`` in file order."""
    from .adm_prep import WeatherDaily

    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(WEATHER_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rec = WeatherDaily(
                date=date.fromisoformat(row["date"]),
                tmin_c=float(row["tmin_c"]),
                tmax_c=float(row["tmax_c"]),
                tmean_c=float(row["tmean_c"]),
                precip_mm=float(row["precip_mm"]),
            )
            out.setdefault(row["field_id"], []).append(rec)
    return out


def write_csv(path: PathLike, header: List[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
