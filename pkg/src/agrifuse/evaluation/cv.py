"""Cross-validated training and field / sub-field scoring."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from ..fusion import FusedCube, concat_cubes
from ..models.gbdt import GbdtParams, gbdt_fit, gbdt_predict
from ..models.lstm import LstmParams, lstm_fit
from .folds import FoldAssignment
from .metrics import mape, r2

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("field_mape", "field_r2", "subfield_mape", "subfield_r2")
THREADS_ENV = "AGRIFUSE_THREADS"


class CVError(RuntimeError):
    """A fold cannot be evaluated."""


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


@dataclass
class MetricsTable:
    rows: List[dict]
    metadata: dict = field(default_factory=dict)

    @property
    def mean(self) -> Dict[str, float]:
        return {c: float(np.mean([r[c] for r in self.rows])) for c in METRIC_COLUMNS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("fold", "n_fields", "n_pixels") + METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([r["fold"], r["n_fields"], r["n_pixels"]] + [repr(float(r[c])) for c in METRIC_COLUMNS])
        m = self.mean
        w.writerow(
            ["mean", sum(r["n_fields"] for r in self.rows), sum(r["n_pixels"] for r in self.rows)]
            + [repr(m[c]) for c in METRIC_COLUMNS]
        )
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"metadata": self.metadata, "folds": self.rows, "mean": self.mean}, indent=2, sort_keys=True)


def fold_metrics(
    y: np.ndarray, y_pred: np.ndarray, field_index: np.ndarray
) -> Dict[str, float]:
    """Sub-field scores on pooled pixels; field scores on per-field means."""
    fields = np.unique(field_index)
    fy = np.array([y[field_index == f].mean() for f in fields])
    fp = np.array([y_pred[field_index == f].mean() for f in fields])
    return {
        "field_mape": mape(fy, fp),
        "field_r2": r2(fy, fp),
        "subfield_mape": mape(y, y_pred),
        "subfield_r2": r2(y, y_pred),
    }


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(fold)]).generate_state(1)[0])


def fit_predict(
    kind: str,
    train: List[FusedCube],
    valid: List[FusedCube],
    test: List[FusedCube],
    params: Union[GbdtParams, LstmParams, None],
    seed: int,
) -> np.ndarray:
    """Train one model on ``train`` (early stopping on ``valid``) and predict ``test``."""
    tv, tm, ty, _ = concat_cubes(train)
    vv, vm, vy, _ = concat_cubes(valid)
    xv, xm, _, _ = concat_cubes(test)
    if kind == "gbdt":
        flat = lambda a: a.reshape(a.shape[0], -1)
        model = gbdt_fit(flat(tv), ty, (flat(vv), vy), params or GbdtParams(), seed)
        return gbdt_predict(model, flat(xv))
    if kind == "lstm":
        model = lstm_fit((tv, tm, ty), (vv, vm, vy), params or LstmParams(), seed)
        return model.predict(xv, xm)
    raise ValueError(f"unknown model kind {kind!r}; expected 'gbdt' or 'lstm'")


def _run_fold(kind, fold, folds, by_fold, params, seed):
    with threadpool_limits(limits=1):
        others = [i for i in range(folds.k) if i != fold]
        valid_fold = others[0]
        train = [c for i in others[1:] for c in by_fold[i]]
        valid = by_fold[valid_fold]
        test = by_fold[fold]
        if not train or not valid:
            raise CVError(f"fold {fold}: empty training or validation split")
        pred = fit_predict(kind, train, valid, test, params, _fold_seed(seed, fold))
        _, _, y, field_index = concat_cubes(test)
        row = {"fold": fold, "n_fields": len(test), "n_pixels": int(len(y))}
        row.update(fold_metrics(y.astype(np.float64), pred, field_index))
        offsets = np.cumsum([0] + [c.n_pixels for c in test])
        per_field = {c.field_id: pred[offsets[j] : offsets[j + 1]] for j, c in enumerate(test)}
        return row, per_field


def evaluate_cv(
    cubes: Sequence[FusedCube],
    folds: FoldAssignment,
    kind: str,
    params: Union[GbdtParams, LstmParams, None] = None,
    seed: int = 0,
    n_jobs: Optional[int] = None,
    metadata: Optional[dict] = None,
) -> Tuple[MetricsTable, Dict[str, np.ndarray]]:
    """K-fold evaluation; returns the metrics table and per-field test predictions.

    For test fold ``i`` the lowest-index remaining fold is held out for early
    stopping and the rest is used for training. Folds run in parallel
    (``n_jobs`` workers, default from ``AGRIFUSE_THREADS``) with BLAS pinned to
    one thread, so results do not depend on the worker count.
    """
    if kind not in ("gbdt", "lstm"):
        raise ValueError(f"unknown model kind {kind!r}; expected 'gbdt' or 'lstm'")
    by_fold: Dict[int, List[FusedCube]] = {i: [] for i in range(folds.k)}
    for c in sorted(cubes, key=lambda c: c.field_id):
        if c.field_id not in folds.fold_of:
            raise CVError(f"field {c.field_id} has no fold assignment")
        by_fold[folds.fold_of[c.field_id]].append(c)
    for i, members in by_fold.items():
        if not members:
            raise CVError(f"fold {i}: none of its fields survived preprocessing")
    n_jobs = worker_count() if n_jobs is None else n_jobs
    results = Parallel(n_jobs=min(n_jobs, folds.k))(
        delayed(_run_fold)(kind, i, folds, by_fold, params, seed) for i in range(folds.k)
    )
    rows = [r for r, _ in results]
    preds: Dict[str, np.ndarray] = {}
    for _, p in results:
        preds.update(p)
    meta = {"model": kind, "k": folds.k, "seed": seed}
    meta.update(metadata or {})
    return MetricsTable(rows, meta), preds
