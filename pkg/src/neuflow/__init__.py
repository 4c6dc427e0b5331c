"""NeuFlow: global-to-local optical flow with global matching at 1/16 and local refinement at 1/8."""

from .config import ConfigError, NeuFlowConfig, load_config
from .data import DatasetSpec, FlowSample, flow_to_color, generate_synthetic, load_dataset, read_flo, write_flo
from .evalbench import BenchReport, EpeReport, benchmark, epe, evaluate
from .model import (
    FlowPrediction,
    NeuFlow,
    StreamState,
    deterministic,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .training import LossBreakdown, Schedule, TrainState, fit, multiscale_loss, train_step

__version__ = "0.1.0"

__all__ = [
    "BenchReport",
    "ConfigError",
    "DatasetSpec",
    "EpeReport",
    "FlowPrediction",
    "FlowSample",
    "LossBreakdown",
    "NeuFlow",
    "NeuFlowConfig",
    "Schedule",
    "StreamState",
    "TrainState",
    "benchmark",
    "deterministic",
    "epe",
    "evaluate",
    "fit",
    "flow_to_color",
    "generate_synthetic",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "multiscale_loss",
    "parameter_count",
    "read_flo",
    "save_checkpoint",
    "train_step",
    "write_flo",
]
