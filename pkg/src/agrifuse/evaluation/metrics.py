"""Regression scores."""

from __future__ import annotations

import numpy as np


def mape(y, y_pred) -> float:
    """Mean absolute percentage error as a fraction (0.1 == 10%)."""
    y = np.asarray(y, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y.shape != y_pred.shape or y.size == 0:
        raise ValueError(f"need equal, non-empty shapes, got {y.shape} and {y_pred.shape}")
    if np.any(y <= 0):
        raise ValueError("MAPE is undefined for non-positive targets")
    return float(np.mean(np.abs(y - y_pred) / y))


def r2(y, y_pred) -> float:
    """Coefficient of determination."""
    y = np.asarray(y, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_pred.shape}")
    if y.size < 2:
        raise ValueError("R^2 needs at least two samples")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for a constant target")
    return 1.0 - float(np.sum((y - y_pred) ** 2)) / ss_tot
