"""Squared-error gradient-boosted regression trees, exact greedy splits.

Split search is made order-independent: candidate sums are accumulated
over rows sorted by ``(feature value, residual)`` and leaf means over sorted
residuals, so permuting the training rows yields the identical model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class Node:
    value: float | None = None
    feature: int | None = None
    threshold: float | None = None
    left: Node | None = None
    right: Node | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self):
        if self.is_leaf:
            return {"value": self.value}
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d):
        if "value" in d:
            return cls(value=float(d["value"]))
        return cls(feature=int(d["feature"]), threshold=float(d["threshold"]),
                   left=cls.from_dict(d["left"]), right=cls.from_dict(d["right"]))


@dataclass
class RegressionTree:
    root: Node
    max_depth: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        for r in range(len(X)):
            node = self.root
            while not node.is_leaf:
                node = node.left if X[r, node.feature] < node.threshold else node.right
            out[r] = node.value
        return out

    def depth(self) -> int:
        def d(n):
            return 0 if n.is_leaf else 1 + max(d(n.left), d(n.right))
        return d(self.root)


def _sorted_mean(v):
    return float(np.sort(v).sum() / len(v))


def _best_split(X, r, idx):
    """(gain, feature, threshold) of the best split of rows ``idx``, or None."""
    n = len(idx)
    rs = r[idx]
    total = np.sort(rs).sum()
    parent = total * total / n
    best = None
    for f in range(X.shape[1]):
        xs = X[idx, f]
        order = np.lexsort((rs, xs))
        xv = xs[order]
        csum = np.cumsum(rs[order])
        left_n = np.arange(1, n)
        distinct = xv[1:] > xv[:-1]
        if not distinct.any():
            continue
        sl = csum[:-1][distinct]
        nl = left_n[distinct]
        sr = total - sl
        nr = n - nl
        gain = sl * sl / nl + sr * sr / nr - parent
        thresholds = (xv[:-1][distinct] + xv[1:][distinct]) / 2
        k = int(np.argmax(gain))  # first maximum = lowest threshold
        if gain[k] > 0 and (best is None or gain[k] > best[0]):
            best = (float(gain[k]), f, float(thresholds[k]))
    return best


def _grow(X, r, idx, depth, max_depth):
    if depth >= max_depth or len(idx) < 2:
        return Node(value=_sorted_mean(r[idx]))
    split = _best_split(X, r, idx)
    if split is None:
        return Node(value=_sorted_mean(r[idx]))
    _, f, thr = split
    go_left = X[idx, f] < thr
    return Node(feature=f, threshold=thr,
                left=_grow(X, r, idx[go_left], depth + 1, max_depth),
                right=_grow(X, r, idx[~go_left], depth + 1, max_depth))


def fit_tree(X, residuals, max_depth) -> RegressionTree:
    return RegressionTree(_grow(X, residuals, np.arange(len(X)), 0, max_depth), max_depth)


@dataclass
class GBRTModel:
    base_score: float
    shrinkage: float
    trees: list[RegressionTree] = field(default_factory=list)
    max_depth: int = 3
    n_features: int = 0
    log_target: bool = False

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def raw_predict(self, X) -> np.ndarray:
        X = self._check(X)
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out = out + self.shrinkage * tree.predict(X)
        return out

    def predict(self, X) -> np.ndarray:
        """Nonnegative predictions for a 2-D array (or a single feature vector)."""
        single = np.ndim(X) == 1
        raw = self.raw_predict(np.atleast_2d(X))
        out = np.expm1(raw) if self.log_target else raw
        out = np.maximum(out, 0.0)
        return out[0] if single else out

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got shape {X.shape}")
        return X

    def to_dict(self):
        return {"base_score": self.base_score, "shrinkage": self.shrinkage, "max_depth": self.max_depth,
                "n_features": self.n_features, "log_target": self.log_target,
                "trees": [t.root.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["base_score"]), float(d["shrinkage"]),
                   [RegressionTree(Node.from_dict(t), int(d["max_depth"])) for t in d["trees"]],
                   int(d["max_depth"]), int(d["n_features"]), bool(d.get("log_target", False)))


def fit(features, targets, n_rounds: int = 100, max_depth: int = 3, shrinkage: float = 0.1,
        log_target: bool = False, history: list | None = None) -> GBRTModel:
    """Fit a boosted ensemble; ``history`` (if given) receives the training MSE after each round."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0 or X.shape[1] == 0:
        raise DataError(f"features must be a nonempty N x D array, got shape {X.shape}")
    if y.shape != (len(X),):
        raise DataError(f"targets must have length {len(X)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("features and targets must be finite")
    if n_rounds < 0 or max_depth < 1 or not 0 < shrinkage <= 1:
        raise ValueError("need n_rounds >= 0, max_depth >= 1, 0 < shrinkage <= 1")
    if log_target:
        if np.any(y < 0):
            raise DataError("log target needs nonnegative targets")
        y = np.log1p(y)
    base = _sorted_mean(y)
    model = GBRTModel(base, shrinkage, [], max_depth, X.shape[1], log_target)
    pred = np.full(len(y), base)
    if history is not None:
        history.append(float(np.mean((y - pred) ** 2)))
    for _ in range(n_rounds):
        tree = fit_tree(X, y - pred, max_depth)
        model.trees.append(tree)
        pred = pred + shrinkage * tree.predict(X)
        if history is not None:
            history.append(float(np.mean((y - pred) ** 2)))
    return model


def predict(model: GBRTModel, features) -> np.ndarray | float:
    return model.predict(features)


def save_model(model: GBRTModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1) + "\n")


def load_model(path) -> GBRTModel:
    try:
        return GBRTModel.from_dict(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a GBRT model document: {exc}") from None
