"""Anomaly-aware probabilistic forecasting.

Series are split multiplicatively into seasonal, trend, anomaly and residual
factors; a recurrent model attends over its hidden states at anomalous and
extreme-event steps; Monte-Carlo dropout with a per-step probability search
gives the predictive distribution.
"""

from .features import PreparedSeries, prepare_series
from .metrics import EvalReport, crps, evaluate, rmse, run_ablation
from .model import (AAModel, ModelConfig, TrainConfig, attention_weights, aa_layer, critical_set, forward,
                    train, zero_shot_forecast)
from .series import (CsvSchema, Dataset, FeatureWindow, Normalizer, RawSeries, ScenarioConfig, load_csv,
                     make_windows, split_80_20, synth_generate, write_csv)
from .star import DecomposedSeries, DecompositionConfig, decompose, extract_anomalies, loess_trend
from .uncertainty import ForecastDistribution, dynamic_optimize, mc_sample

__version__ = "0.1.0"

__all__ = [
    "AAModel", "CsvSchema", "Dataset", "DecomposedSeries", "DecompositionConfig", "EvalReport",
    "FeatureWindow", "ForecastDistribution", "ModelConfig", "Normalizer", "PreparedSeries", "RawSeries",
    "ScenarioConfig", "TrainConfig", "aa_layer", "attention_weights", "critical_set", "crps", "decompose",
    "dynamic_optimize", "evaluate", "extract_anomalies", "forward", "load_csv", "loess_trend", "make_windows",
    "mc_sample", "prepare_series", "rmse", "run_ablation", "split_80_20", "synth_generate", "train",
    "write_csv", "zero_shot_forecast",
]
