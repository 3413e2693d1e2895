"""Training loop, checkpoints, evaluation and batched inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, NumericError
from ..seeding import mix_seed
from . import layers as L
from .adam import AdamHyper, AdamState, adam_step
from .model import ArchitectureSpec, Model, check_labels, cross_entropy, forward, init_model, loss_and_backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    epochs: int = 30
    adam: AdamHyper = AdamHyper()
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_top1: float | None
    val_top3: float | None


@dataclass
class Checkpoint:
    model: Model
    band_min: np.ndarray
    band_max: np.ndarray
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def spec(self) -> ArchitectureSpec:
        return self.model.spec

    @property
    def n_classes(self) -> int:
        return self.model.spec.n_classes

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return normalize(x, self.band_min, self.band_max)


def band_range(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-band min and max over a ``(n, h, w, bands)`` array."""
    axes = tuple(range(x.ndim - 1))
    return x.min(axis=axes).astype(np.float64), x.max(axis=axes).astype(np.float64)


def normalize(x, band_min, band_max):
    """Scale to [0, 1] per band; constant bands map to 0."""
    span = band_max - band_min
    constant = span <= 0
    scale = np.where(constant, 0.0, 1.0 / np.where(constant, 1.0, span))
    return (np.asarray(x, dtype=np.float64) - band_min) * scale


def topk_hits(probs: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """True where the label is among the ``k`` largest entries (ties toward lower class)."""
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def predict_proba(checkpoint: Checkpoint, x_u8: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Softmax outputs for raw uint8 tiles ``(n, h, w, bands)``."""
    out = np.empty((len(x_u8), checkpoint.n_classes))
    for s in range(0, len(x_u8), batch_size):
        xb = checkpoint.normalize(x_u8[s : s + batch_size])
        out[s : s + batch_size] = forward(checkpoint.model, xb, "infer")[0]
    return out


def evaluate(checkpoint: Checkpoint, x_u8: np.ndarray, labels) -> tuple[float, float, float]:
    """(top-1 accuracy, top-3 accuracy, mean cross-entropy)."""
    labels = check_labels(labels, checkpoint.n_classes)
    if len(labels) == 0:
        raise DataError("empty evaluation set")
    probs = predict_proba(checkpoint, x_u8)
    return (
        float(topk_hits(probs, labels, 1).mean()),
        float(topk_hits(probs, labels, 3).mean()),
        cross_entropy(probs, labels),
    )


def train_arrays(x_train, y_train, x_val, y_val, spec: ArchitectureSpec, config: TrainConfig) -> Checkpoint:
    """Train on uint8 tile arrays; keeps the lowest-validation-loss epoch."""
    if len(x_train) == 0:
        raise DataError("empty training set")
    if tuple(x_train.shape[1:]) != spec.input_shape:
        raise DataError(f"tiles {x_train.shape[1:]} do not match model input {spec.input_shape}")
    y_train = check_labels(y_train, spec.n_classes)
    y_val = check_labels(y_val, spec.n_classes)
    bmin, bmax = band_range(x_train)
    xt = normalize(x_train, bmin, bmax)

    model = init_model(spec, mix_seed(config.seed, 1))
    state = AdamState.zeros_like(model.params)
    shuffle_rng = np.random.default_rng(mix_seed(config.seed, 2))
    dropout_rng = np.random.default_rng(mix_seed(config.seed, 3))
    bn_layers = [k for k, l in enumerate(spec.layers) if l.kind == "batchnorm"]

    ckpt = Checkpoint(model, bmin, bmax)
    best = None
    best_score = np.inf
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(xt))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            loss, grads, caches = loss_and_backward(model, xt[idx], y_train[idx], "train", dropout_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            for k in bn_layers:
                L.update_running_stats(model.buffers[k], caches[k])
            adam_step(model.params, grads, state, config.adam)
            total += loss * len(idx)
        train_loss = total / len(xt)
        if len(y_val):
            top1, top3, val_loss = evaluate(ckpt, x_val, y_val)
            score = val_loss
        else:
            top1 = top3 = val_loss = None
            score = train_loss
        ckpt.history.append(EpochRecord(epoch, train_loss, val_loss, top1, top3))
        log.info("epoch %d train %.4f val %s top1 %s", epoch, train_loss, val_loss, top1)
        if score < best_score:
            best_score = score
            best = (epoch, model.copy())
    ckpt.best_epoch, ckpt.model = best
    return ckpt


def train(tiles, class_grid, samples, spec: ArchitectureSpec, config: TrainConfig) -> Checkpoint:
    """Train one model on the cells of ``samples`` using ``tiles`` and ``class_grid`` labels."""
    if not samples.train:
        raise DataError("empty sample set")
    def arrays(cells):
        if not cells:
            return np.empty((0,) + tuple(tiles.tile_shape), np.uint8), np.empty(0, np.int64)
        idx = np.asarray(cells)
        if np.any(tiles.mask[idx[:, 0], idx[:, 1]]) or np.any(class_grid.mask[idx[:, 0], idx[:, 1]]):
            raise DataError("sample set references nodata cells")
        return tiles.gather(idx), class_grid.values[idx[:, 0], idx[:, 1]]
    xt, yt = arrays(samples.train)
    xv, yv = arrays(samples.validation)
    return train_arrays(xt, yt, xv, yv, spec, config)
