"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: list[dict[str, np.ndarray]] = field(default_factory=list)
    v: list[dict[str, np.ndarray]] = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> AdamState:
        return cls(
            [{k: np.zeros_like(a) for k, a in p.items()} for p in params],
            [{k: np.zeros_like(a) for k, a in p.items()} for p in params],
            0,
        )


def adam_step(params, grads, state: AdamState, hyper: AdamHyper = AdamHyper()):
    """One in-place update of ``params``; returns ``(params, state)``.

    ``params`` and ``grads`` are lists of ``{name: array}`` dicts.
    """
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        for name in p:
            gk = g.get(name)
            if gk is None:
                continue
            m[name] = b1 * m[name] + (1.0 - b1) * gk
            v[name] = b2 * v[name] + (1.0 - b2) * gk * gk
            mhat = m[name] / c1
            vhat = v[name] / c2
            p[name] = p[name] - hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)
    return params, state
