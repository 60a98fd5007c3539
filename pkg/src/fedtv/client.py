"""Client-side work: pooled pretraining, local fine-tuning and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientDataset, Split, pooled
from .errors import StructuralError, TrainingError
from .models import ACTIVATIONS, MODEL_KINDS, Architecture
from .params import ParameterVector, TrainableMask
from .seeding import as_seed_sequence


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 1
    learning_rate: float = 0.1
    batch_size: int = 16
    proximal_mu: float = 0.0
    model_kind: str = "logistic_regression"
    hidden_dim: int = 16
    activation: str = "tanh"
    # None trains every layer; a tuple of layer names freezes the rest
    trainable_layers: tuple[str, ...] | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise StructuralError("epochs must be >= 1")
        if self.batch_size < 1:
            raise StructuralError("batch_size must be >= 1")
        if not self.learning_rate > 0 or not np.isfinite(self.learning_rate):
            raise StructuralError("learning_rate must be a positive finite number")
        if self.proximal_mu < 0:
            raise StructuralError("proximal_mu must be nonnegative")
        if self.model_kind not in MODEL_KINDS:
            raise StructuralError(f"model_kind must be one of {MODEL_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise StructuralError(f"activation must be one of {ACTIVATIONS}")

    def architecture(self, feature_dim: int, num_classes: int) -> Architecture:
        return Architecture(self.model_kind, feature_dim, num_classes, self.hidden_dim, self.activation)

    def mask_for(self, arch: Architecture) -> TrainableMask | None:
        if self.trainable_layers is None:
            return None
        return TrainableMask.from_layers(arch.partition, self.trainable_layers)


def architecture_for(cfg: LocalTrainConfig, ds: ClientDataset) -> Architecture:
    return cfg.architecture(ds.feature_dim, ds.num_classes)


def _train(theta: np.ndarray, split: Split, arch: Architecture, cfg: LocalTrainConfig, epochs: int,
           rng: np.random.Generator, anchor: np.ndarray | None, mask: TrainableMask | None) -> np.ndarray:
    n = len(split)
    if n == 0:
        raise StructuralError("training on an empty split")
    mu = cfg.proximal_mu
    lr = cfg.learning_rate
    idx = None if mask is None or mask.is_full else mask.indices
    theta = theta.copy()
    for epoch in range(epochs):
        # a full batch keeps the natural order so identical clients stay bit-identical
        order = np.arange(n) if cfg.batch_size >= n else rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grad = arch.loss_and_grad(theta, split.X[batch], split.y[batch], anchor, mu)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite loss {loss!r} in epoch {epoch + 1}, batch at {start}")
            if idx is None:
                theta -= lr * grad
            else:
                theta[idx] -= lr * grad[idx]
    if not np.all(np.isfinite(theta)):
        raise TrainingError("parameters became non-finite")
    return theta


def local_update(model: ParameterVector, data: ClientDataset, cfg: LocalTrainConfig,
                 anchor: ParameterVector | None = None, *, seed: int | np.random.SeedSequence = 0,
                 mask: TrainableMask | None = None) -> ParameterVector:
    """Run ``cfg.epochs`` epochs of mini-batch gradient descent from ``model``.

    The proximal term pulls toward ``anchor`` (default: ``model`` itself).
    With a mask only the trainable coordinates move; frozen ones are returned
    bit-identical.
    """
    cfg.validate()
    arch = architecture_for(cfg, data)
    if model.dim != arch.dim:
        raise StructuralError(f"model has {model.dim} parameters, {arch.kind} needs {arch.dim}")
    if mask is None:
        mask = cfg.mask_for(arch)
    anchor_values = None
    if cfg.proximal_mu > 0:
        anchor_values = (anchor if anchor is not None else model).values
    rng = np.random.default_rng(seed)
    theta = _train(model.values, data.train, arch, cfg, cfg.epochs, rng, anchor_values, mask)
    return ParameterVector(theta, model.partition)


def cold_start(arch: Architecture, seed: int | np.random.SeedSequence = 0) -> ParameterVector:
    return arch.init(np.random.default_rng(seed))


def pretrain_init(datasets: list[ClientDataset], cfg: LocalTrainConfig, pretrain_epochs: int, *,
                  seed: int | np.random.SeedSequence = 0) -> ParameterVector:
    """Shared starting point: cold start trained on the union of all clients' data.

    Pretraining always updates every parameter (no mask, no proximal term).
    """
    if not datasets:
        raise StructuralError("pretraining needs at least one client dataset")
    cfg.validate()
    arch = architecture_for(cfg, datasets[0])
    init_seq, train_seq = as_seed_sequence(seed).spawn(2)
    theta0 = cold_start(arch, init_seq)
    if pretrain_epochs <= 0:
        return theta0
    data = pooled(datasets, "train")
    if len(data) == 0:
        raise StructuralError("pooled pretraining data is empty")
    plain = LocalTrainConfig(
        epochs=pretrain_epochs, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
        model_kind=cfg.model_kind, hidden_dim=cfg.hidden_dim, activation=cfg.activation,
    )
    try:
        theta = _train(theta0.values, data, arch, plain, pretrain_epochs, np.random.default_rng(train_seq), None, None)
    except TrainingError as exc:
        raise TrainingError(f"pretraining diverged: {exc}") from exc
    return ParameterVector(theta, theta0.partition)


def evaluate(model: ParameterVector, split: Split, arch: Architecture) -> tuple[float, float]:
    """Accuracy and mean cross-entropy. Ties in the argmax go to the lowest class index."""
    if len(split) == 0:
        raise StructuralError("evaluation on an empty split")
    if model.dim != arch.dim:
        raise StructuralError(f"model has {model.dim} parameters, {arch.kind} needs {arch.dim}")
    logits = arch.logits(model.values, split.X)
    pred = np.argmax(logits, axis=1)
    acc = float(np.mean(pred == split.y))
    loss = arch.loss(model.values, split.X, split.y)
    return acc, loss
