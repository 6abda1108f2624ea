"""Losses, hard-pixel mining, SGD and the poly learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, NumericError
from .tensor import Tensor, log_softmax, mul, sum_


@dataclass(frozen=True)
class OhemConfig:
    theta: float = 0.7
    min_kept: int = 100_000

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ContractError(f"OHEM theta must be in (0, 1], got {self.theta}")
        if self.min_kept < 1:
            raise ContractError(f"OHEM min_kept must be >= 1, got {self.min_kept}")


@dataclass(frozen=True)
class SupervisionConfig:
    main_weight: float = 1.0
    aux_weight: float = 0.4

    def __post_init__(self):
        if self.main_weight < 0 or self.aux_weight < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 0.01
    max_iter: int = 40_000
    power: float = 0.9
    weight_decay: float = 0.0005
    momentum: float = 0.9

    def __post_init__(self):
        if self.base_lr <= 0 or self.power <= 0:
            raise ContractError("base_lr and power must be positive")


def _check_labels(labels: np.ndarray, num_classes: int, ignore_label: int) -> np.ndarray:
    valid = labels != ignore_label
    if (labels[valid] < 0).any() or (labels[valid] >= num_classes).any():
        bad = labels[valid & ((labels < 0) | (labels >= num_classes))][0]
        raise DataError(f"label {int(bad)} outside [0, {num_classes}) and not the ignore label {ignore_label}")
    return valid


def class_balanced_ce(
    logits: Tensor,
    labels: np.ndarray,
    class_weights: Optional[Sequence[float]] = None,
    ignore_label: int = 255,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean over scored pixels of ``weight[y] * -log softmax(logits)[y]``.

    ``mask`` further restricts the scored pixels (used by OHEM). The mean
    divides by the number of scored pixels, not by the summed weights.
    """
    B, K, H, W = logits.shape
    if labels.shape != (B, H, W):
        raise ContractError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = _check_labels(labels, K, ignore_label)
    if mask is not None:
        valid = valid & mask
    count = int(valid.sum())
    if count == 0:
        raise DataError("no labelled pixels to score")
    weights = np.ones(K) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    safe = np.where(valid, labels, 0)
    target = np.zeros(logits.shape, dtype=logits.dtype)
    b, h, w = np.nonzero(valid)
    target[b, safe[b, h, w], h, w] = weights[safe[b, h, w]]
    return mul(sum_(mul(log_softmax(logits, axis=1), target)), -1.0 / count)


def class_weights_from_labels(label_maps: Iterable[np.ndarray], num_classes: int, ignore_label: int = 255) -> np.ndarray:
    """Per-class weights 1 / ln(1.02 + class frequency)."""
    counts = np.zeros(num_classes, np.float64)
    for labels in label_maps:
        valid = labels[labels != ignore_label].astype(np.int64)
        counts += np.bincount(valid, minlength=num_classes)[:num_classes]
    freq = counts / max(counts.sum(), 1.0)
    return (1.0 / np.log(1.02 + freq)).astype(np.float32)


def true_class_probs(logits: np.ndarray, labels: np.ndarray, ignore_label: int = 255) -> np.ndarray:
    """Softmax probability of the labelled class per pixel (1.0 where ignored)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    safe = np.where(labels == ignore_label, 0, labels)
    picked = np.take_along_axis(probs, safe[:, None].astype(np.int64), axis=1)[:, 0]
    return np.where(labels == ignore_label, 1.0, picked)


def ohem_select(probs: np.ndarray, labels: np.ndarray, cfg: OhemConfig, ignore_label: int = 255) -> np.ndarray:
    """Mask of hard pixels: true-class probability below ``theta``.

    When fewer than ``min_kept`` pixels are hard, the ``min_kept`` lowest
    probability labelled pixels are kept instead, ties broken by ascending
    flat pixel index.
    """
    probs = np.asarray(probs)
    if probs.shape != labels.shape:
        raise ContractError(f"probs {probs.shape} and labels {labels.shape} differ")
    valid = labels != ignore_label
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DataError("OHEM: no labelled pixels")
    hard = valid & (probs < cfg.theta)
    if int(hard.sum()) >= cfg.min_kept:
        return hard
    flat_probs = probs.reshape(-1)
    candidates = np.flatnonzero(valid.reshape(-1))
    order = candidates[np.lexsort((candidates, flat_probs[candidates]))]
    keep = np.zeros(probs.size, bool)
    keep[order[: min(cfg.min_kept, n_valid)]] = True
    return keep.reshape(probs.shape)


def poly_lr(iteration: int, cfg: ScheduleConfig) -> float:
    if not 0 <= iteration <= cfg.max_iter:
        raise ContractError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    if cfg.max_iter == 0:
        return cfg.base_lr
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter) ** cfg.power


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocities: Sequence[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In place: ``v = momentum*v + grad + wd*param``; ``param -= lr*v``.

    Refuses the whole step if any gradient is non-finite.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; SGD step refused")
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


class SGD:
    """Momentum SGD over a fixed, ordered list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0005):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step([p.data for p in self.params], grads, self.velocities, lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def deep_supervised_loss(
    main_logits: Tensor,
    aux_logits: Tensor,
    labels: np.ndarray,
    sup: SupervisionConfig = SupervisionConfig(),
    ohem: Optional[OhemConfig] = None,
    class_weights: Optional[Sequence[float]] = None,
    ignore_label: int = 255,
) -> Tensor:
    """Weighted main + auxiliary loss; OHEM, when given, masks the main term only."""
    mask = None
    if ohem is not None:
        probs = true_class_probs(main_logits.data, labels, ignore_label)
        mask = ohem_select(probs, labels, ohem, ignore_label)
    main = class_balanced_ce(main_logits, labels, class_weights, ignore_label, mask)
    total = mul(main, sup.main_weight)
    if sup.aux_weight:
        aux = class_balanced_ce(aux_logits, labels, class_weights, ignore_label)
        total = total + mul(aux, sup.aux_weight)
    return total
