"""Slimmed 2D U-Net: construction, training, persistence, tiled inference."""

from .checkpoint import CheckpointError, load, load_trainer, save
from .config import DEFAULT_FILTERS, ENCODER_PARAMS, REFERENCE_DECODER_PARAMS, ConfigError, UNetConfig
from .inference import PredictionVolume, UtilizationReport, predict_slice, predict_volume, tile_grid, utilization
from .model import DECODER, ENCODER, UNetModel, build
from .train import Trainer, TrainingDiverged, TrainSpec, train, write_loss_log

__all__ = [
    "CheckpointError", "ConfigError", "DECODER", "DEFAULT_FILTERS", "ENCODER", "ENCODER_PARAMS",
    "PredictionVolume", "REFERENCE_DECODER_PARAMS", "Trainer", "TrainSpec", "TrainingDiverged",
    "UNetConfig", "UNetModel", "UtilizationReport", "build", "load", "load_trainer", "predict_slice",
    "predict_volume", "save", "tile_grid", "train", "utilization", "write_loss_log",
]
