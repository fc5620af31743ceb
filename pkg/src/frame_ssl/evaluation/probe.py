"""Linear softmax probe trained on frozen per-patch features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..objectives import Adam
from ..tensor import Tensor


@dataclass
class LinearHead:
    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)
    classes: np.ndarray  # label value of each output column

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64).reshape(-1, self.weight.shape[0])
        return x @ self.weight + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        z = self.decision_function(features)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(features), axis=1)]


def head_loss(weight: Tensor, bias: Tensor, x: np.ndarray, y_idx: np.ndarray) -> Tensor:
    logits = T.add_trailing(T.matmul(Tensor(x, dtype=weight.dtype), weight), bias)
    return T.cross_entropy(logits, y_idx)


def fit_linear_head(features, labels, epochs: int = 50, lr: float = 0.05, batch_size: int = 4096,
                    weight_decay: float = 0.0, seed: int = 0) -> LinearHead:
    """Train a per-patch softmax classifier with Adam on cross-entropy.

    ``features`` is ``(..., D)`` and ``labels`` the matching ``(...)`` integer
    grid; negative labels are ignored. Only classes that occur in ``labels``
    get an output column, so absent classes never enter the loss.
    """
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    y = np.asarray(labels).reshape(-1)
    if len(y) != len(x):
        raise ValueError(f"{len(x)} feature rows but {len(y)} labels")
    keep = y >= 0
    x, y = x[keep], y[keep]
    classes = np.unique(y)
    y_idx = np.searchsorted(classes, y)
    d, c = x.shape[1], len(classes)
    weight = Tensor(np.zeros((d, c)), requires_grad=True)
    bias = Tensor(np.zeros(c), requires_grad=True)
    opt = Adam({"weight": weight, "bias": bias}, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            loss = head_loss(weight, bias, x[idx], y_idx[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr)
    return LinearHead(weight.data.astype(np.float64), bias.data.astype(np.float64), classes)
