"""Small numpy reverse-mode engine: graphs, layers, Adam, early stopping, CPKW1 files."""

from .graph import (
    LAYER_KINDS,
    GraphError,
    LayerNode,
    ModelGraph,
    ShapeError,
    Tensor,
    backward,
    forward,
    forward_all,
    mse_loss,
)
from .io import WeightFileError, load_checkpoint, load_weights, read_tensors, save_checkpoint, save_weights
from .optim import AdamState, EarlyStopping, adam_step
from .train import Checkpoint, Dataset, EpochRecord, TrainConfig, TrainLog, predict_array, train

__all__ = [
    "LAYER_KINDS",
    "GraphError",
    "LayerNode",
    "ModelGraph",
    "ShapeError",
    "Tensor",
    "backward",
    "forward",
    "forward_all",
    "mse_loss",
    "WeightFileError",
    "load_weights",
    "read_tensors",
    "save_weights",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "AdamState",
    "EarlyStopping",
    "adam_step",
    "Dataset",
    "EpochRecord",
    "TrainConfig",
    "TrainLog",
    "predict_array",
    "train",
]
