"""Tiny softmax classifiers with hand-written gradients.

Two architectures share one flat-vector interface:

* ``logistic_regression``: layers ``W`` (C x d, row-major) and ``b`` (C).
* ``mlp_one_hidden``: layers ``W1`` (h x d), ``b1`` (h), ``W2`` (C x h), ``b2`` (C)
  with a tanh or relu hidden activation.

Each weight matrix and each bias vector is its own named layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .params import LayerPartition, ParameterVector

MODEL_KINDS = ("logistic_regression", "mlp_one_hidden")
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class Architecture:
    kind: str
    feature_dim: int
    num_classes: int
    hidden_dim: int = 16
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise StructuralError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise StructuralError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.feature_dim < 1 or self.num_classes < 2:
            raise StructuralError("need feature_dim >= 1 and num_classes >= 2")
        if self.kind == "mlp_one_hidden" and self.hidden_dim < 1:
            raise StructuralError("mlp needs hidden_dim >= 1")

    @property
    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        d, c, h = self.feature_dim, self.num_classes, self.hidden_dim
        if self.kind == "logistic_regression":
            return [("W", (c, d)), ("b", (c,))]
        return [("W1", (h, d)), ("b1", (h,)), ("W2", (c, h)), ("b2", (c,))]

    @property
    def partition(self) -> LayerPartition:
        shapes = self.layer_shapes
        return LayerPartition.from_sizes([n for n, _ in shapes], [int(np.prod(s)) for _, s in shapes])

    @property
    def dim(self) -> int:
        return self.partition.dim

    def unpack(self, theta: np.ndarray) -> list[np.ndarray]:
        theta = np.asarray(theta)
        if theta.shape != (self.dim,):
            raise StructuralError(f"expected {self.dim} parameters for {self.kind}, got {theta.shape}")
        out = []
        for (_, shape), (s, e) in zip(self.layer_shapes, self.partition.boundaries):
            out.append(theta[s:e].reshape(shape))
        return out

    def init(self, rng: np.random.Generator) -> ParameterVector:
        """Cold-start initialization: scaled Gaussian weights, zero biases."""
        parts = []
        for name, shape in self.layer_shapes:
            if name.startswith("W"):
                parts.append(rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape).ravel())
            else:
                parts.append(np.zeros(shape))
        return ParameterVector(np.concatenate(parts), self.partition)

    # forward / backward

    def _hidden(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def logits(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        if self.kind == "logistic_regression":
            W, b = self.unpack(theta)
            return X @ W.T + b
        W1, b1, W2, b2 = self.unpack(theta)
        return self._hidden(X @ W1.T + b1) @ W2.T + b2

    def loss_and_grad(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray,
                      anchor: np.ndarray | None = None, mu: float = 0.0) -> tuple[float, np.ndarray]:
        """Mean softmax cross-entropy, plus ``mu/2 * ||theta - anchor||^2`` if ``mu > 0``."""
        n = X.shape[0]
        if n == 0:
            raise StructuralError("loss on an empty batch")
        if self.kind == "logistic_regression":
            W, b = self.unpack(theta)
            z = X @ W.T + b
            loss, dz = _softmax_xent(z, y)
            grad = np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])
        else:
            W1, b1, W2, b2 = self.unpack(theta)
            pre = X @ W1.T + b1
            hid = self._hidden(pre)
            z = hid @ W2.T + b2
            loss, dz = _softmax_xent(z, y)
            dhid = dz @ W2
            if self.activation == "tanh":
                dpre = dhid * (1.0 - hid * hid)
            else:
                dpre = dhid * (pre > 0)
            grad = np.concatenate([(dpre.T @ X).ravel(), dpre.sum(axis=0), (dz.T @ hid).ravel(), dz.sum(axis=0)])
        if mu > 0.0:
            if anchor is None:
                raise StructuralError("proximal term needs an anchor model")
            diff = theta - anchor
            loss += 0.5 * mu * float(diff @ diff)
            grad = grad + mu * diff
        return loss, grad

    def loss(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray,
             anchor: np.ndarray | None = None, mu: float = 0.0) -> float:
        return self.loss_and_grad(theta, X, y, anchor, mu)[0]


def _softmax_xent(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits (already divided by n)."""
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = -float(logp[np.arange(n), y].mean())
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    return loss, dz / n
