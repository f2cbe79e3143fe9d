"""Learned sensor-to-cage mapping: autodiff core, layers, model, training."""

from .model import (
    DeformerModel,
    EmaState,
    ModelError,
    build_model,
    cage_scale,
    deformer_loss,
    forward,
    forward_batch,
    infer_smoothed,
    load_checkpoint,
    save_checkpoint,
    time_embedding,
)
from .direct import (
    DirectRegressor,
    build_direct_model,
    forward_direct,
    load_direct_checkpoint,
    predict_displacements,
    save_direct_checkpoint,
)
from .train import Adam, History, TrainConfig, cosine_lr, train

__all__ = [
    "DeformerModel", "EmaState", "ModelError", "build_model", "cage_scale",
    "deformer_loss", "forward", "forward_batch", "infer_smoothed",
    "load_checkpoint", "save_checkpoint", "time_embedding",
    "DirectRegressor", "build_direct_model", "forward_direct",
    "load_direct_checkpoint", "predict_displacements", "save_direct_checkpoint",
    "Adam", "History", "TrainConfig", "cosine_lr", "train",
]
