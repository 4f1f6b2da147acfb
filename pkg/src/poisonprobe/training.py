"""SGD-with-momentum training and the accuracy / attack-success metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, pack_params, run_backward, run_forward, softmax_xent, unpack_params
from .data import Dataset
from .models import ModelHandle, predict_batch

log = logging.getLogger(__name__)


class DivergenceError(NonFiniteError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    dropout: float = 0.5
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning rate and batch size must be positive, epochs non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class TrainResult:
    model: ModelHandle
    epoch_losses: list[float] = field(default_factory=list)


def train(model: ModelHandle, ds: Dataset, cfg: TrainConfig, *, provenance: str | None = None,
          return_history: bool = False):
    """Minibatch SGD with momentum on the mean cross-entropy; returns a new handle.

    Minibatches follow a fresh seeded permutation each epoch and the final
    short batch is kept. Dropout is applied after hidden dense layers.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if ds.image_shape != model.spec.input_shape:
        raise ValueError(f"dataset images {ds.image_shape} do not fit model input {model.spec.input_shape}")
    if ds.classes != model.spec.classes:
        raise ValueError(f"dataset has {ds.classes} classes, model {model.spec.classes}")
    spec = model.spec
    params = model.params.astype(np.float32)
    velocity = np.zeros_like(params)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    history: list[float] = []
    n = len(ds)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            weights = unpack_params(spec, params)
            logits, cache = run_forward(spec, weights, ds.images[idx], rng=rng,
                                        dense_dropout=cfg.dropout, keep_cache=True)
            loss, dlogits = softmax_xent(logits, ds.labels[idx])
            batch_loss = float(loss.sum())
            if not np.isfinite(batch_loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            _, grads = run_backward(spec, weights, cache, dlogits / len(idx))
            grad = pack_params(grads)
            velocity = (cfg.momentum * velocity - cfg.learning_rate * grad).astype(np.float32)
            params = params + velocity
            total += batch_loss
        if not np.all(np.isfinite(params)):
            raise DivergenceError(f"parameters diverged in epoch {epoch}")
        history.append(total / n)
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    out = model.with_params(params, provenance=provenance or model.provenance)
    if return_history:
        return TrainResult(out, history)
    return out


@dataclass(frozen=True)
class EvalMetrics:
    classification_accuracy: float
    attack_success_rate: float | None
    per_class_accuracy: tuple[float, ...]

    def as_dict(self) -> dict:
        return {
            "classification_accuracy": self.classification_accuracy,
            "attack_success_rate": self.attack_success_rate,
            "per_class_accuracy": list(self.per_class_accuracy),
        }


def evaluate_accuracy(model: ModelHandle, ds: Dataset) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict_batch(model, ds.images) == ds.labels))


def per_class_accuracy(model: ModelHandle, ds: Dataset) -> tuple[float, ...]:
    pred = predict_batch(model, ds.images)
    out = []
    for c in range(ds.classes):
        mask = ds.labels == c
        out.append(float(np.mean(pred[mask] == c)) if mask.any() else float("nan"))
    return tuple(out)


def attack_success_rate(model: ModelHandle, adversarial: Dataset, target: int) -> float:
    """Fraction of adversarial inputs classified as ``target``."""
    if len(adversarial) == 0:
        raise ValueError("adversarial set is empty")
    return float(np.mean(predict_batch(model, adversarial.images) == target))


def evaluate(model: ModelHandle, clean: Dataset, adversarial: Dataset | None = None,
             target: int | None = None) -> EvalMetrics:
    asr = None
    if adversarial is not None and target is not None:
        asr = attack_success_rate(model, adversarial, target)
    return EvalMetrics(evaluate_accuracy(model, clean), asr, per_class_accuracy(model, clean))
