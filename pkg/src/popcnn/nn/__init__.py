"""Minimal channels-last CNN engine: layers, hand-written backprop, Adam, training."""

from .adam import AdamHyper, AdamState, adam_step
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .model import ArchitectureSpec, LayerSpec, Model, build_preset, dense_only, forward, init_model, loss_and_backward
from .train import Checkpoint, TrainConfig, evaluate, predict_proba, train, train_arrays

__all__ = [
    "AdamHyper", "AdamState", "adam_step", "load_checkpoint", "save_checkpoint", "grad_check",
    "ArchitectureSpec", "LayerSpec", "Model", "build_preset", "dense_only", "forward", "init_model",
    "loss_and_backward", "Checkpoint", "TrainConfig", "evaluate", "predict_proba", "train", "train_arrays",
]
