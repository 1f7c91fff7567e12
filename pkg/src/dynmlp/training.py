"""SGD training harness: warmup + cosine schedule, label smoothing, mixup, top-k evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .datasets import DatasetSplit, ExampleArrays, batch_iterator
from .errors import ConfigError, NumericalError
from .fusion import FusionModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: float = 2
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.0
    seed: int = 0
    precision: str = "float64"
    eval_batch_size: int = 512

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("training.epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("training.batch_size", "must be >= 1")
        for key in ("base_lr", "momentum", "weight_decay", "warmup_epochs", "mixup_alpha"):
            if not getattr(self, key) >= 0:
                raise ConfigError(f"training.{key}", "must be non-negative")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("training.label_smoothing", "must be in [0, 1)")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("training.precision", "must be float64 or float32")


@dataclass
class Metrics:
    top1: float
    top5: float
    mean_loss: float
    topk: dict[int, float] = field(default_factory=dict)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr over warmup_steps, then half-cosine decay toward 0."""
    if not 0 <= step < max(total_steps, 1):
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def smooth_targets(labels: np.ndarray, num_classes: int, epsilon: float) -> np.ndarray:
    """(1 - eps) on the true class plus eps / C everywhere."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    targets = np.full((len(labels), num_classes), epsilon / num_classes)
    targets[np.arange(len(labels)), labels] += 1.0 - epsilon
    return targets


def soft_cross_entropy(scores: Tensor, targets: np.ndarray) -> Tensor:
    """Batch mean of -sum(target * log_softmax(scores))."""
    logp = ag.log_softmax(scores)
    batch = scores.shape[0] if scores.ndim > 1 else 1
    return ag.scale(ag.tensor_sum(logp * Tensor(targets, dtype=scores.data.dtype)), -1.0 / batch)


def smoothed_cross_entropy(scores: Tensor, labels, epsilon: float, num_classes: int) -> Tensor:
    labels = np.atleast_1d(np.asarray(labels))
    return soft_cross_entropy(scores, smooth_targets(labels, num_classes, epsilon))


def mixup_batch(features: np.ndarray, encoded: np.ndarray, targets: np.ndarray, alpha: float,
                rng: np.random.Generator, lam: float | None = None, perm: np.ndarray | None = None):
    """Interpolate features, metadata encodings and targets against a shuffled pairing.

    Mixing soft targets is the same as weighting the two per-target losses by
    lam and 1 - lam, since the loss is linear in the target.
    """
    if alpha == 0 and lam is None:
        return features, encoded, targets, 1.0
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = rng.permutation(len(features))
    mix = lambda a: lam * a + (1.0 - lam) * a[perm]  # noqa: E731
    return mix(features), mix(encoded), mix(targets), lam


class SGD:
    """v <- momentum * v + grad + wd * param; param <- param - lr * v."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self._scratch = [np.empty_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.velocity, lr, self.momentum, self.weight_decay,
                 self._scratch)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], velocity: list[np.ndarray],
             lr: float, momentum: float, weight_decay: float,
             scratch: Sequence[np.ndarray] | None = None) -> None:
    # scratch buffers avoid fresh full-size temporaries on every step
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        tmp = scratch[i] if scratch is not None else np.empty_like(p.data)
        v *= momentum
        if g is not None:
            v += g
        if weight_decay:
            np.multiply(p.data, weight_decay, out=tmp)
            v += tmp
        np.multiply(v, lr, out=tmp)
        p.data -= tmp


def rank_of_true(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """0-based rank of the true class; ties go to the lower class index."""
    true = scores[np.arange(len(labels)), labels][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > true) | ((scores == true) & (idx < labels[:, None]))
    return ahead.sum(axis=1)


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(rank_of_true(scores, labels) < k))


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def model_scores(model: FusionModel, data: ExampleArrays, batch_size: int = 512) -> np.ndarray:
    model.eval()
    out = []
    with ag.no_grad():
        for start in range(0, len(data), batch_size):
            part = data.take(np.arange(start, min(start + batch_size, len(data))))
            out.append(model(Tensor(part.features), Tensor(part.encoded)).data)
    return np.concatenate(out) if out else np.zeros((0, model.fusion_cfg.num_classes))


def evaluate(model: FusionModel, data: ExampleArrays, k_list: Sequence[int] = (1, 5),
             batch_size: int = 512) -> Metrics:
    """Top-k accuracy and mean (unsmoothed) cross-entropy of the normalized prediction."""
    scores = model_scores(model, data, batch_size)
    return metrics_from_scores(scores, data.labels, k_list)


def metrics_from_scores(scores: np.ndarray, labels: np.ndarray, k_list: Sequence[int] = (1, 5)) -> Metrics:
    logp = _log_softmax_np(scores)
    mean_loss = float(-logp[np.arange(len(labels)), labels].mean()) if len(labels) else float("nan")
    topk = {k: topk_accuracy(scores, labels, k) for k in sorted(set(k_list) | {1, 5})}
    return Metrics(topk[1], topk[5], mean_loss, {k: topk[k] for k in k_list})


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    optimizer: SGD
    epochs_completed: int


def train_loop(model: FusionModel, split: DatasetSplit, cfg: TrainConfig,
               start_epoch: int = 0, velocity: list[np.ndarray] | None = None,
               on_epoch: Callable[[list[dict], SGD], None] | None = None) -> TrainResult:
    """Train ``model`` in place from ``start_epoch`` up to ``cfg.epochs``.

    ``on_epoch(rows, optimizer)`` runs after each epoch's validation pass.
    """
    cfg.validate()
    train, val = split.arrays("train"), split.arrays("val")
    C = split.num_classes
    params = model.parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    if velocity is not None:
        opt.velocity = [np.array(v, dtype=p.data.dtype) for v, p in zip(velocity, params)]
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = int(round(cfg.warmup_epochs * steps_per_epoch))
    dtype = ag.get_default_dtype()
    history: list[dict] = []

    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        mix_rng = np.random.default_rng([cfg.seed, 2, epoch])
        loss_sum, count, hits1, hits5 = 0.0, 0, 0, 0
        lr = 0.0
        for b, batch in enumerate(batch_iterator(train, cfg.batch_size, cfg.seed, epoch)):
            step = epoch * steps_per_epoch + b
            lr = lr_at(step, total_steps, cfg.base_lr, warmup_steps)
            targets = smooth_targets(batch.labels, C, cfg.label_smoothing)
            feats, enc, targets, _ = mixup_batch(batch.features, batch.encoded, targets, cfg.mixup_alpha, mix_rng)
            ag.reset_tape()
            model.zero_grad()
            scores = model(Tensor(feats, dtype=dtype), Tensor(enc, dtype=dtype))
            loss = soft_cross_entropy(scores, targets)
            value = loss.item()
            if not math.isfinite(value):
                ag.reset_tape()
                raise NumericalError(f"non-finite loss {value} at step {step} (epoch {epoch + 1})")
            ag.backward(loss)
            opt.step(lr)
            n = len(batch)
            loss_sum += value * n
            count += n
            ranks = rank_of_true(scores.data, batch.labels)
            hits1 += int((ranks < 1).sum())
            hits5 += int((ranks < 5).sum())
        ag.reset_tape()
        val_metrics = evaluate(model, val, batch_size=cfg.eval_batch_size)
        rows = [
            {"epoch": epoch + 1, "split": "train", "top1": hits1 / count, "top5": hits5 / count,
             "mean_loss": loss_sum / count, "lr": lr},
            {"epoch": epoch + 1, "split": "val", "top1": val_metrics.top1, "top5": val_metrics.top5,
             "mean_loss": val_metrics.mean_loss, "lr": lr},
        ]
        history.extend(rows)
        log.info("epoch %d loss %.4f val top1 %.4f", epoch + 1, rows[0]["mean_loss"], val_metrics.top1)
        if on_epoch is not None:
            on_epoch(rows, opt)

    return TrainResult(model.state_dict(), history, opt, max(start_epoch, cfg.epochs))
