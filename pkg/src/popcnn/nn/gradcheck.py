"""Analytic-vs-central-difference gradient comparison."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import log_softmax
from .model import ArchitectureSpec, forward, init_model, loss_and_backward

FD_STEP = 1e-5
DENOM_FLOOR = 1e-6


@dataclass
class LayerReport:
    layer: int
    kind: str
    n_checked: int = 0
    max_rel_error: float = 0.0
    skipped: bool = False
    n_kinked: int = 0  # probes whose +-step straddled a relu/max-pool switch


@dataclass
class GradCheckReport:
    layers: list[LayerReport] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.layers if not r.skipped), default=0.0)

    @property
    def kinked_fraction(self) -> float:
        kinked = sum(r.n_kinked for r in self.layers)
        total = kinked + sum(r.n_checked for r in self.layers)
        return kinked / total if total else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)


def grad_check(spec: ArchitectureSpec, tolerance: float = 1e-4, seed: int = 0, batch: int = 2,
               step: float = FD_STEP) -> GradCheckReport:
    """Check every parameter of a randomly initialised ``spec``.

    Inputs are uniform in [0, 1] with random labels; batchnorm runs in train
    mode (batch statistics); dropout layers are bypassed and reported as
    skipped.  Probes whose central difference crosses a relu or max-pool
    switch are not differentiable there; they are excluded and counted in
    ``n_kinked``.
    """
    rng = np.random.default_rng(seed)
    model = init_model(spec, seed)
    # nonzero biases so relu/pool boundaries are not aligned with zero
    for p in model.params:
        for name in ("b", "beta"):
            if name in p:
                p[name] = rng.uniform(-0.1, 0.1, size=p[name].shape)
    x = rng.uniform(0, 1, size=(batch,) + spec.input_shape)
    y = rng.integers(0, spec.n_classes, size=batch)

    labels = np.asarray(y)

    def probe():
        # loss plus the piecewise-linear activation pattern (relu signs, pool argmaxes)
        _, caches, logits = forward(model, x, "train", dropout=False)
        logp = log_softmax(logits)
        pattern = [c if kind == "relu" else c[1] for c, kind in zip(caches, kinds) if kind in ("relu", "maxpool2x2")]
        return float(-logp[np.arange(len(labels)), labels].mean()), pattern

    def same(a, b):
        return all(np.array_equal(u, v) for u, v in zip(a, b))

    kinds = [layer.kind for layer in spec.layers]
    _, base = probe()

    _, grads, _ = loss_and_backward(model, x, y, "train", dropout=False)
    report = GradCheckReport(tolerance=tolerance)
    for k, layer in enumerate(spec.layers):
        if layer.kind == "dropout":
            report.layers.append(LayerReport(k, layer.kind, skipped=True))
            continue
        if not model.params[k]:
            continue
        rep = LayerReport(k, layer.kind)
        for name, arr in model.params[k].items():
            flat = arr.reshape(-1)
            numeric = np.empty_like(flat)
            smooth = np.ones(flat.size, dtype=bool)
            for q in range(flat.size):
                orig = flat[q]
                flat[q] = orig + step
                up, pu = probe()
                flat[q] = orig - step
                down, pd = probe()
                flat[q] = orig
                numeric[q] = (up - down) / (2 * step)
                smooth[q] = same(pu, base) and same(pd, base)
            err = relative_error(grads[k][name].reshape(-1), numeric)[smooth]
            rep.n_checked += int(smooth.sum())
            rep.n_kinked += int((~smooth).sum())
            if err.size:
                rep.max_rel_error = max(rep.max_rel_error, float(err.max()))
        report.layers.append(rep)
    return report
