"""The two regressors: boosted trees and a stacked LSTM."""

from .gbdt import GbdtModel, GbdtParams, GbdtRegressor, Tree, gbdt_fit, gbdt_predict
from .lstm import (
    Adam,
    DivergenceError,
    LstmModel,
    LstmParams,
    LstmRegressor,
    feature_stats,
    last_unmasked,
    lstm_fit,
    lstm_forward,
)

__all__ = [
    "Adam",
    "DivergenceError",
    "GbdtModel",
    "GbdtParams",
    "GbdtRegressor",
    "LstmModel",
    "LstmParams",
    "LstmRegressor",
    "Tree",
    "feature_stats",
    "gbdt_fit",
    "gbdt_predict",
    "last_unmasked",
    "lstm_fit",
    "lstm_forward",
]
