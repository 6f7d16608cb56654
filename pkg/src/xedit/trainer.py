"""Adam training of the base model and the gradient-based editing baselines."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
import logging
import time

import numpy as np

from .data import Dataset, SampleSet
from .errors import ConfigError, NumericalError
from .model import ModelConfig, TinyViT, init_model, loss_and_grads, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_lambda: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.l2_lambda < 0:
            raise ConfigError("l2_lambda must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# gradient baselines run Adam for 10 epochs; the small rate and batch keep them from wrecking the model outright
BASELINE_CONFIG = TrainConfig(epochs=10, batch_size=4, learning_rate=1e-4)


class Adam:
    """Adam with bias correction, one moment pair per parameter name."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = (p - upd).astype(p.dtype)


def _fit(model: TinyViT, images, labels, config: TrainConfig, anchor: dict | None = None, tag: str = "train"):
    """Shared Adam loop.  ``anchor`` enables the pull-to-snapshot L2 penalty."""
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    n = len(labels)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(model, images[idx], labels[idx])
            if anchor is not None and config.l2_lambda > 0:
                for k, p in model.params.items():
                    diff = p.astype(np.float64) - anchor[k]
                    grads[k] = grads[k] + 2.0 * config.l2_lambda * diff
                    loss += config.l2_lambda * float(np.sum(diff * diff))
            if not np.isfinite(loss):
                raise NumericalError(f"{tag}: non-finite loss at epoch {epoch} batch {bi}")
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step(model.params, grads)
            total += loss * len(idx)
            seen += len(idx)
        pred = predict(model, images)[0]
        acc = float(np.mean(pred == labels))
        history.append({"epoch": epoch, "loss": total / seen, "accuracy": acc})
        log.debug("%s epoch %d loss %.4f acc %.4f", tag, epoch, total / seen, acc)
    return model, history


def train(model: TinyViT, train_set: Dataset, config: TrainConfig = TrainConfig()):
    """Adam on mean cross-entropy; returns ``(model, history)``."""
    return _fit(model, train_set.images, train_set.labels.astype(np.int64), config, tag="train")


def finetune_baseline(model: TinyViT, edits: SampleSet, config: TrainConfig = BASELINE_CONFIG, l2_lambda: float | None = None):
    """FineTune (``l2_lambda=0``) or FineTune+L2 toward the pre-edit weights.

    Returns ``(model, seconds)``.
    """
    if len(edits) == 0:
        raise ConfigError("finetune baseline needs a non-empty edit set")
    if l2_lambda is not None:
        config = replace(config, l2_lambda=l2_lambda)
    snapshot = {k: v.astype(np.float64) for k, v in model.params.items()}
    t0 = time.perf_counter()
    edited, _ = _fit(model, edits.images, edits.labels.astype(np.int64), config,
                     anchor=snapshot if config.l2_lambda > 0 else None, tag="finetune")
    return edited, time.perf_counter() - t0


def retrain_baseline(model_config: ModelConfig, train_set: Dataset, edits: SampleSet | None, config: TrainConfig = TrainConfig()):
    """Fresh model trained on train plus edit samples.  Returns ``(model, seconds)``."""
    images, labels = train_set.images, train_set.labels
    if edits is not None and len(edits):
        images = np.concatenate([images, edits.images])
        labels = np.concatenate([labels, edits.labels])
    t0 = time.perf_counter()
    model, _ = _fit(init_model(model_config), images, labels.astype(np.int64), config, tag="retrain")
    return model, time.perf_counter() - t0
