"""Road traffic forecasting with learned regional-knowledge transfer.

The package couples per-road speed forecasting with an auxiliary branch
over a grid of city cells (living population, POI and image-derived
features), carried onto roads through Gaussian-masked bipartite
attention.  Everything runs on a small reverse-mode autodiff engine over
float64 numpy arrays; a synthetic-city generator with a controllable
population-speed coupling makes the regional pathway's benefit testable.
"""

from .data import (NormStats, RegionGrid, RoadGraph, Sample, TrafficDataset,
                   fill_missing, load_dataset, prepare_dataset, split, window,
                   zscore_fit_apply)
from .errors import (ConfigError, DataError, NumericError, ShapeError,
                     UsageError)
from .model import (ModelConfig, TrafficModel, VARIANTS, load_checkpoint,
                    mae_loss, restore_model, save_checkpoint)
from .synth import SynthSpec, generate, inject_missing
from .training import (MetricsReport, TrainResult, ablate, compute_metrics,
                       evaluate, ha_baseline, stratified_report, train)

__version__ = "0.1.0"

__all__ = [
    "NormStats", "RegionGrid", "RoadGraph", "Sample", "TrafficDataset",
    "fill_missing", "load_dataset", "prepare_dataset", "split", "window",
    "zscore_fit_apply",
    "ConfigError", "DataError", "NumericError", "ShapeError", "UsageError",
    "ModelConfig", "TrafficModel", "VARIANTS", "load_checkpoint", "mae_loss",
    "restore_model", "save_checkpoint",
    "SynthSpec", "generate", "inject_missing",
    "MetricsReport", "TrainResult", "ablate", "compute_metrics", "evaluate",
    "ha_baseline", "stratified_report", "train",
    "__version__",
]
