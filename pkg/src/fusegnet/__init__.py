"""Diabetic foot ulcer segmentation with parallel scSE decoder attention."""
from .attention import PScSE, SCSE, ChannelSE, ScseSettings, SpatialSE
from .ensemble import EnsembleBundle, binarize, ensemble_predict, predict
from .losses import LossSettings, dice_loss, focal_loss, hybrid_loss
from .network import FUSegNet, NetworkConfig, count_parameters
from .trainer import CheckpointRecord, TrainSettings, train_fold

__version__ = "0.1.0"

__all__ = [
    "ChannelSE", "SpatialSE", "SCSE", "PScSE", "ScseSettings",
    "FUSegNet", "NetworkConfig", "count_parameters",
    "LossSettings", "dice_loss", "focal_loss", "hybrid_loss",
    "TrainSettings", "CheckpointRecord", "train_fold",
    "EnsembleBundle", "predict", "ensemble_predict", "binarize",
]
