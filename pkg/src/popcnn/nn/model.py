"""Architecture specs, presets, parameter initialisation, forward and backward passes."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from . import layers as L

LAYER_KINDS = ("conv3x3", "maxpool2x2", "relu", "flatten", "dense", "dropout", "batchnorm", "softmax")
TRAINABLE = ("conv3x3", "dense", "batchnorm")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int | None = None  # conv out_channels / dense units
    rate: float | None = None  # dropout

    def to_dict(self):
        d = {"kind": self.kind}
        if self.size is not None:
            d["size"] = self.size
        if self.rate is not None:
            d["rate"] = self.rate
        return d


@dataclass(frozen=True)
class ArchitectureSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    n_classes: int
    preset: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        for k, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise DataError(f"layer {k}: unknown kind {layer.kind!r}")
        if not self.layers or self.layers[-1].kind != "softmax":
            raise DataError("final layer must be softmax")
        dense = [l for l in self.layers if l.kind in TRAINABLE and l.kind != "batchnorm"]
        if len(dense) < 2 or dense[-1].kind != "dense" or dense[-2].kind != "dense":
            raise DataError("the last two weight layers must be dense")
        if dense[-1].size != self.n_classes:
            raise DataError(f"output dense width {dense[-1].size} != n_classes {self.n_classes}")
        self.trace()

    def trace(self) -> list[tuple[int, ...]]:
        """Output shape of every layer (batch axis omitted); raises on mismatch."""
        shape = self.input_shape
        shapes = []
        for k, layer in enumerate(self.layers):
            kind = layer.kind
            if kind == "conv3x3":
                if len(shape) != 3:
                    raise DataError(f"layer {k}: conv3x3 needs a spatial input, got {shape}")
                shape = (shape[0], shape[1], layer.size)
            elif kind == "maxpool2x2":
                if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                    raise DataError(f"layer {k}: maxpool2x2 needs spatial input >= 2x2, got {shape}")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise DataError(f"layer {k}: dense needs a flat input, got {shape}")
                shape = (layer.size,)
            elif kind == "softmax":
                if len(shape) != 1:
                    raise DataError(f"layer {k}: softmax needs a flat input, got {shape}")
            shapes.append(shape)
        return shapes

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "n_classes": self.n_classes,
            "preset": self.preset,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["input_shape"]),
            tuple(LayerSpec(l["kind"], l.get("size"), l.get("rate")) for l in d["layers"]),
            d["n_classes"],
            d.get("preset", "custom"),
        )


_PRESETS = {
    # name: (input side, conv widths per block, hidden dense widths)
    "vgg-a-paper": (74, [[64], [128], [256, 256], [512, 512], [512, 512]], [4096, 4096]),
    "micro": (74, [[8], [16], [32], [32], [32]], [64, 64]),
    "tiny": (18, [[8], [16]], [32, 32]),
}


def build_preset(name: str, bands: int = 7, n_classes: int = 18, dropout: float = 0.0, batchnorm: bool = False):
    """VGG-A style stack: conv blocks each closed by a 2x2 max-pool, hidden dense
    layers, then a dense output of width ``n_classes`` and softmax."""
    if name not in _PRESETS:
        raise DataError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    side, blocks, hidden = _PRESETS[name]
    layers = []
    for block in blocks:
        for width in block:
            layers.append(LayerSpec("conv3x3", width))
            if batchnorm:
                layers.append(LayerSpec("batchnorm"))
            layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool2x2"))
    layers.append(LayerSpec("flatten"))
    for units in hidden:
        layers.append(LayerSpec("dense", units))
        if batchnorm:
            layers.append(LayerSpec("batchnorm"))
        layers.append(LayerSpec("relu"))
        if dropout > 0:
            layers.append(LayerSpec("dropout", rate=dropout))
    layers.append(LayerSpec("dense", n_classes))
    layers.append(LayerSpec("softmax"))
    return ArchitectureSpec((side, side, bands), tuple(layers), n_classes, name)


def dense_only(n_in: int, hidden: list[int], n_classes: int) -> ArchitectureSpec:
    layers = [LayerSpec("flatten")]
    for units in hidden:
        layers += [LayerSpec("dense", units), LayerSpec("relu")]
    layers += [LayerSpec("dense", n_classes), LayerSpec("softmax")]
    return ArchitectureSpec((1, 1, n_in), tuple(layers), n_classes, "dense-only")


@dataclass
class Model:
    """Spec plus trainable ``params`` and batchnorm ``buffers`` (one dict per layer)."""

    spec: ArchitectureSpec
    params: list[dict[str, np.ndarray]]
    buffers: list[dict[str, np.ndarray]] = field(default_factory=list)

    def copy(self) -> Model:
        return Model(self.spec, copy.deepcopy(self.params), copy.deepcopy(self.buffers))

    def tensors(self):
        """(layer index, name, array) for every parameter, in declaration order."""
        for k, p in enumerate(self.params):
            for name in sorted(p):
                yield k, name, p[name]


def init_model(spec: ArchitectureSpec, seed: int = 0) -> Model:
    """He-uniform weights (limit ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    params, buffers = [], []
    shapes = [spec.input_shape] + spec.trace()
    for k, layer in enumerate(spec.layers):
        in_shape = shapes[k]
        p, b = {}, {}
        if layer.kind == "conv3x3":
            fan_in = 9 * in_shape[2]
            lim = np.sqrt(6.0 / fan_in)
            p["W"] = rng.uniform(-lim, lim, size=(3, 3, in_shape[2], layer.size))
            p["b"] = np.zeros(layer.size)
        elif layer.kind == "dense":
            lim = np.sqrt(6.0 / in_shape[0])
            p["W"] = rng.uniform(-lim, lim, size=(in_shape[0], layer.size))
            p["b"] = np.zeros(layer.size)
        elif layer.kind == "batchnorm":
            c = in_shape[-1]
            p["gamma"] = np.ones(c)
            p["beta"] = np.zeros(c)
            b["running_mean"] = np.zeros(c)
            b["running_var"] = np.ones(c)
        params.append(p)
        buffers.append(b)
    return Model(spec, params, buffers)


def check_batch(spec: ArchitectureSpec, x: np.ndarray):
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise DataError(f"layer 0: input batch {x.shape[1:]} does not match spec input {spec.input_shape}")


def forward(model: Model, x: np.ndarray, mode: str = "infer", rng=None, dropout: bool = True):
    """Class probabilities for batch ``x``.

    Returns ``(probs, caches, logits)``.  ``mode="train"`` uses batch
    statistics in batchnorm and (unless ``dropout=False``) samples dropout
    masks from ``rng``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    spec = model.spec
    check_batch(spec, x)
    train = mode == "train"
    caches = []
    h = np.asarray(x, dtype=np.float64)
    for k, layer in enumerate(spec.layers):
        p = model.params[k]
        kind = layer.kind
        if kind == "conv3x3":
            h, c = L.conv_forward(h, p)
        elif kind == "maxpool2x2":
            h, c = L.pool_forward(h)
        elif kind == "relu":
            h, c = L.relu_forward(h)
        elif kind == "flatten":
            c = h.shape
            h = h.reshape(h.shape[0], -1)
        elif kind == "dense":
            h, c = L.dense_forward(h, p)
        elif kind == "dropout":
            if train and dropout:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                h, c = L.dropout_forward(h, layer.rate, rng)
            else:
                c = None
        elif kind == "batchnorm":
            h, c = L.batchnorm_forward(h, p, model.buffers[k], train)
        elif kind == "softmax":
            logits = h
            h = L.softmax(h)
            c = None
        caches.append(c)
    return h, caches, logits


def backward(model: Model, caches, dlogits: np.ndarray):
    """Gradients for every parameter, given dLoss/dlogits."""
    grads = [dict() for _ in model.params]
    dh = dlogits
    for k in range(len(model.spec.layers) - 2, -1, -1):
        layer = model.spec.layers[k]
        c = caches[k]
        p = model.params[k]
        kind = layer.kind
        if kind == "conv3x3":
            dh, grads[k] = L.conv_backward(dh, c, p)
        elif kind == "maxpool2x2":
            dh = L.pool_backward(dh, c)
        elif kind == "relu":
            dh = L.relu_backward(dh, c)
        elif kind == "flatten":
            dh = dh.reshape(c)
        elif kind == "dense":
            dh, grads[k] = L.dense_backward(dh, c, p)
        elif kind == "dropout":
            dh = L.dropout_backward(dh, c)
        elif kind == "batchnorm":
            dh, grads[k] = L.batchnorm_backward(dh, c, p)
    return grads


def cross_entropy(probs: np.ndarray, labels: np.ndarray, clamp: float = 1e-15) -> float:
    """Mean categorical cross-entropy of probability rows; ``log`` clamped at ``clamp``."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, clamp))))


def check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    return labels


def loss_only(model: Model, x, labels, mode="train", rng=None, dropout=True) -> float:
    labels = check_labels(labels, model.spec.n_classes)
    _, _, logits = forward(model, x, mode, rng, dropout)
    logp = L.log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_and_backward(model: Model, x, labels, mode="train", rng=None, dropout=True):
    """Mean cross-entropy and its gradients; also returns the forward caches."""
    labels = check_labels(labels, model.spec.n_classes)
    probs, caches, logits = forward(model, x, mode, rng, dropout)
    n = len(labels)
    logp = L.log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, backward(model, caches, dlogits), caches
