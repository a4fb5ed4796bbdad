"""Early fusion of all modalities into a per-pixel multivariate time series."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .adm_prep import SOIL_BANDS, TERRAIN_BANDS, WEATHER_FEATURES, WeatherAggregate
from .composite import N_TIMESTEPS, S2_BANDS, SceneSeries
from .grid import Raster
from .io import FormatError, PathLike, _read_framed, _write_framed

FCB_MAGIC = b"FCB1"
MODALITY_ORDER = ("s2", "weather", "soil", "dem")


class ModalityError(ValueError):
    """A requested modality is missing or sits on the wrong grid."""


@dataclass(frozen=True)
class ModalitySelection:
    s2: bool = True
    weather: bool = False
    soil: bool = False
    dem: bool = False

    def __post_init__(self):
        if not self.s2:
            raise ModalityError("S2 is the temporal reference and cannot be deselected")

    @classmethod
    def parse(cls, text: str) -> "ModalitySelection":
        """Parse ``"s2,dem"`` style lists."""
        names = [t.strip().lower() for t in text.split(",") if t.strip()]
        unknown = set(names) - set(MODALITY_ORDER)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}; choose from {MODALITY_ORDER}")
        return cls(**{n: (n in names) for n in MODALITY_ORDER})

    @property
    def tag(self) -> str:
        """Label in the ``S2-Weather-Soil-DEM`` style."""
        parts = ["S2"]
        if self.weather:
            parts.append("Weather")
        if self.soil:
            parts.append("Soil")
        if self.dem:
            parts.append("DEM")
        return "-".join(parts)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(n for n in MODALITY_ORDER if getattr(self, n))

    @property
    def feature_names(self) -> Tuple[str, ...]:
        out: Tuple[str, ...] = S2_BANDS
        if self.weather:
            out += WEATHER_FEATURES
        if self.soil:
            out += SOIL_BANDS
        if self.dem:
            out += TERRAIN_BANDS
        return out

    @property
    def n_features(self) -> int:
        return 12 * self.s2 + 4 * self.weather + 24 * self.soil + 5 * self.dem


ABLATION_SETS = (
    ModalitySelection(),
    ModalitySelection(weather=True),
    ModalitySelection(soil=True),
    ModalitySelection(dem=True),
    ModalitySelection(weather=True, soil=True, dem=True),
)


@dataclass(frozen=True, eq=False)
class FusedCube:
    field_id: str
    pixel_coords: np.ndarray  # (n_pixels, 2) as (col, row)
    feature_names: Tuple[str, ...]
    values: np.ndarray  # (n_pixels, 24, n_features) float32
    timestep_mask: np.ndarray  # (n_pixels, 24) bool
    target: np.ndarray  # (n_pixels,) float32

    @property
    def n_pixels(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


def assemble_cube(
    series: SceneSeries,
    target: Raster,
    sel: ModalitySelection,
    weather: Optional[WeatherAggregate] = None,
    soil: Optional[Raster] = None,
    terrain: Optional[Raster] = None,
    field_id: str = "",
) -> FusedCube:
    """Concatenate per-timestep features of the selected modalities.

    Feature blocks are ``[S2][weather][soil][DEM]``. Static blocks repeat at
    every timestep; masked pixel-timesteps are all zeros. Pixels without a
    target or without any usable timestep are dropped. Nodata in static
    layers (e.g. flat-cell aspect) is zero-filled.
    """
    grid = target.grid
    for name, r in (("soil", soil), ("dem", terrain)):
        if getattr(sel, name):
            if r is None:
                raise ModalityError(f"modality {name!r} selected but not provided")
            if r.grid != grid:
                raise ModalityError(f"{name} raster grid {r.grid} does not match field grid {grid}")
    if sel.weather and weather is None:
        raise ModalityError("modality 'weather' selected but not provided")
    for s in series.selected:
        if s is not None and s.bands.grid != grid:
            raise ModalityError(f"scene {s.date} grid does not match field grid {grid}")

    rows, cols = grid.shape
    n_t = N_TIMESTEPS
    tmask = np.zeros((n_t, rows, cols), dtype=bool)
    blocks: List[np.ndarray] = []
    s2 = np.zeros((n_t, len(S2_BANDS), rows, cols), dtype=np.float32)
    for t, (scene, ok) in enumerate(zip(series.selected, series.timestep_mask)):
        if ok and scene is not None:
            s2[t] = scene.bands.values
            tmask[t] = scene.valid_mask
    blocks.append(s2)
    if sel.weather:
        w = weather.values.astype(np.float32)
        blocks.append(np.broadcast_to(w[:, :, None, None], (n_t, w.shape[1], rows, cols)))
    for name, r in (("soil", soil), ("dem", terrain)):
        if getattr(sel, name):
            static = np.where(r.nodata_mask, np.float32(0), r.values)
            blocks.append(np.broadcast_to(static[None], (n_t,) + static.shape))

    stacked = np.concatenate(blocks, axis=1)  # (t, f, rows, cols)
    keep = ~target.nodata_mask[0] & tmask.any(axis=0)
    rr, cc = np.nonzero(keep)
    values = stacked[:, :, rr, cc].transpose(2, 0, 1)  # (p, t, f)
    mask = tmask[:, rr, cc].T
    values = np.where(mask[:, :, None], values, np.float32(0)).astype(np.float32)
    coords = np.stack([cc, rr], axis=1).astype(np.int64)
    return FusedCube(field_id, coords, sel.feature_names, values, mask, target.values[0, rr, cc].astype(np.float32))


def flatten_for_trees(cube: FusedCube) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Timestep-major design matrix ``[t0 features][t1 features]...``."""
    X = cube.values.reshape(cube.n_pixels, -1)
    names = [f"t{t:02d}_{f}" for t in range(N_TIMESTEPS) for f in cube.feature_names]
    return X, cube.target.copy(), names


class CubeFlattener(TransformerMixin, BaseEstimator):
    """Stateless transformer turning ``(n, 24, F)`` sequences into tree inputs."""

    def fit(self, X, y=None):
        X = np.asarray(X)
        self.n_features_in_ = X.shape[2] if X.ndim == 3 else X.shape[1]
        return self

    def transform(self, X):
        X = np.asarray(X)
        return X.reshape(X.shape[0], -1)


def sequences_for_rnn(
    values: np.ndarray,
    mask: np.ndarray,
    target: np.ndarray,
    batch_size: int,
    seed: int,
    epoch: int = 0,
) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Shuffled mini-batches; the order depends only on ``(seed, epoch)``.

    The last partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(target)
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield values[idx], mask[idx], target[idx]


def concat_cubes(cubes: Sequence[FusedCube]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack cubes into ``(values, mask, target, field_index)``."""
    names = cubes[0].feature_names
    for c in cubes[1:]:
        if c.feature_names != names:
            raise ModalityError(f"cube {c.field_id} has a different feature layout")
    values = np.concatenate([c.values for c in cubes])
    mask = np.concatenate([c.timestep_mask for c in cubes])
    target = np.concatenate([c.target for c in cubes])
    field_index = np.concatenate([np.full(c.n_pixels, i, dtype=np.int64) for i, c in enumerate(cubes)])
    return values, mask, target, field_index


# -- FCB cube file -----------------------------------------------------------

def write_fcb(path: PathLike, cube: FusedCube) -> None:
    header = {
        "field_id": cube.field_id,
        "n_pixels": cube.n_pixels,
        "timesteps": N_TIMESTEPS,
        "n_features": cube.n_features,
        "feature_names": list(cube.feature_names),
        "pixel_coords": cube.pixel_coords.tolist(),
    }
    payload = (
        cube.values.astype("<f4").tobytes()
        + cube.timestep_mask.astype(np.uint8).tobytes()
        + cube.target.astype("<f4").tobytes()
    )
    _write_framed(path, FCB_MAGIC, header, payload)


def read_fcb(path: PathLike) -> FusedCube:
    header, payload = _read_framed(path, FCB_MAGIC)
    n, t, f = int(header["n_pixels"]), int(header["timesteps"]), int(header["n_features"])
    nv, nm = 4 * n * t * f, n * t
    if len(payload) != nv + nm + 4 * n:
        raise FormatError(f"{path}: payload size {len(payload)} does not match header")
    values = np.frombuffer(payload[:nv], dtype="<f4").reshape(n, t, f).astype(np.float32)
    mask = np.frombuffer(payload[nv : nv + nm], dtype=np.uint8).reshape(n, t).astype(bool)
    target = np.frombuffer(payload[nv + nm :], dtype="<f4").astype(np.float32)
    coords = np.asarray(header["pixel_coords"], dtype=np.int64).reshape(n, 2)
    return FusedCube(str(header["field_id"]), coords, tuple(header["feature_names"]), values, mask, target)
