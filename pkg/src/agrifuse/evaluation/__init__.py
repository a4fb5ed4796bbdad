"""Cross-validation protocol, metrics and field reports."""

from .cv import METRIC_COLUMNS, CVError, MetricsTable, evaluate_cv, fit_predict, fold_metrics, worker_count
from .folds import FarmStratifiedGroupKFold, FoldAssignment, assign_folds, make_folds
from .metrics import mape, r2
from .report import PANELS, ReportBundle, field_report, render_report

__all__ = [
    "CVError",
    "FarmStratifiedGroupKFold",
    "FoldAssignment",
    "METRIC_COLUMNS",
    "MetricsTable",
    "PANELS",
    "ReportBundle",
    "assign_folds",
    "evaluate_cv",
    "field_report",
    "fit_predict",
    "fold_metrics",
    "make_folds",
    "mape",
    "r2",
    "render_report",
    "worker_count",
]
