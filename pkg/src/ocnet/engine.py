"""Training loop, checkpoint resume, and dataset evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig
from .data import SegmentationSample, augment, batch_arrays
from .errors import ContractError
from .metrics import ConfusionMatrix, miou
from .model import SegmentationModel, ms_flip_infer
from .nn import resize_bilinear
from .tensor import Tensor
from .training import SGD, class_weights_from_labels, deep_supervised_loss, poly_lr

logger = logging.getLogger(__name__)

LOG_HEADER = "iter\tlr\tloss\tval_miou"


def build_model(cfg: RunConfig) -> SegmentationModel:
    rng = np.random.default_rng([cfg.seed, 0])
    return SegmentationModel(cfg.num_classes, cfg.module, cfg.plan, rng, cfg.backbone, cfg.head_kwargs())


@dataclass
class LogRecord:
    iteration: int
    lr: float
    loss: float
    val_miou: Optional[float] = None

    def line(self) -> str:
        val = "" if self.val_miou is None else f"{self.val_miou:.6f}"
        return f"{self.iteration}\t{self.lr:.9g}\t{self.loss:.9g}\t{val}"


class Trainer:
    """Deep-supervised SGD with poly decay; all randomness comes from seeded generators."""

    def __init__(
        self,
        cfg: RunConfig,
        train: Sequence[SegmentationSample],
        val: Optional[Sequence[SegmentationSample]] = None,
    ):
        if not train:
            raise ContractError("training set is empty")
        self.cfg = cfg
        self.train_set = list(train)
        self.val_set = list(val) if val else []
        self.model = build_model(cfg)
        self.names = [name for name, _ in self.model.named_parameters()]
        self.optimizer = SGD(self.model.parameters(), cfg.momentum, cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.iteration = 0
        self.class_weights = (
            class_weights_from_labels((s.labels for s in self.train_set), cfg.num_classes, cfg.ignore_label)
            if cfg.class_balanced
            else None
        )

    # -- batches -------------------------------------------------------
    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.train_set)
        size = self.cfg.batch_size
        idx = self.rng.choice(n, size=size, replace=size > n)
        samples = [self.train_set[i] for i in idx]
        if self.cfg.augment:
            seeds = self.rng.integers(0, 2**63, size=len(samples))
            samples = [
                augment(s, int(seed), scale_range=(self.cfg.scale_min, self.cfg.scale_max))
                for s, seed in zip(samples, seeds)
            ]
        return batch_arrays(samples)

    # -- optimisation ----------------------------------------------------
    def step(self) -> LogRecord:
        cfg = self.cfg
        lr = poly_lr(self.iteration, cfg.schedule)
        images, labels = self.next_batch()
        self.model.train()
        logits, aux = self.model(Tensor(images))
        H, W = labels.shape[1:]
        loss = deep_supervised_loss(
            resize_bilinear(logits, H, W),
            resize_bilinear(aux, H, W),
            labels,
            cfg.supervision,
            cfg.ohem_config(labels.size),
            self.class_weights,
            cfg.ignore_label,
        )
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step(lr)
        record = LogRecord(self.iteration, lr, loss.item())
        self.iteration += 1
        return record

    def run(self, until: Optional[int] = None, on_record: Optional[Callable[[LogRecord], None]] = None) -> list[LogRecord]:
        """Train up to iteration ``until`` (default ``max_iter``)."""
        until = self.cfg.max_iter if until is None else min(until, self.cfg.max_iter)
        records = []
        while self.iteration < until:
            record = self.step()
            last = self.iteration == self.cfg.max_iter
            periodic = self.cfg.val_every and self.iteration % self.cfg.val_every == 0
            if self.val_set and (last or periodic):
                record.val_miou = self.validate()
            if record.val_miou is not None or record.iteration % max(1, self.cfg.log_every) == 0 or last:
                records.append(record)
                if on_record:
                    on_record(record)
                logger.info(record.line())
        return records

    def validate(self) -> float:
        cm = evaluate(self.model, self.val_set, self.cfg.num_classes, ignore_label=self.cfg.ignore_label)
        return miou(cm)[1]

    # -- persistence ---------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            tensors={k: v.copy() for k, v in self.model.state_dict().items()},
            velocities={name: v.copy() for name, v in zip(self.names, self.optimizer.velocities)},
            iteration=self.iteration,
            rng_state=self.rng.bit_generator.state,
        )

    def restore(self, ckpt: Checkpoint) -> None:
        check_num_classes(ckpt, self.cfg.num_classes)
        self.model.load_state_dict(ckpt.tensors)
        if ckpt.velocities:
            if set(ckpt.velocities) != set(self.names):
                raise ContractError("checkpoint optimizer state does not match the model parameters")
            self.optimizer.velocities = [ckpt.velocities[n].astype(np.float32).copy() for n in self.names]
        self.iteration = ckpt.iteration
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state


def check_num_classes(ckpt: Checkpoint, num_classes: int) -> None:
    weight = ckpt.tensors.get("classifier.weight")
    if weight is None:
        raise ContractError("checkpoint has no classifier weights")
    if weight.shape[0] != num_classes:
        raise ContractError(f"checkpoint predicts {weight.shape[0]} classes but the config says {num_classes}")


def load_model(cfg: RunConfig, ckpt: Checkpoint) -> SegmentationModel:
    check_num_classes(ckpt, cfg.num_classes)
    model = build_model(cfg)
    model.load_state_dict(ckpt.tensors)
    return model.eval()


def predict(
    model: SegmentationModel,
    images: np.ndarray,
    scales: Sequence[float] = (1.0,),
    flip: bool = False,
) -> np.ndarray:
    probs = ms_flip_infer(model, Tensor(images), scales, flip)
    return probs.argmax(axis=1)


def evaluate(
    model: SegmentationModel,
    samples: Sequence[SegmentationSample],
    num_classes: int,
    scales: Sequence[float] = (1.0,),
    flip: bool = False,
    batch_size: int = 1,
    ignore_label: int = 255,
) -> ConfusionMatrix:
    """Confusion matrix over ``samples``.

    One image per forward pass by default, so the result cannot depend on
    how images happen to be grouped or ordered.
    """
    cm = ConfusionMatrix.empty(num_classes)
    for start in range(0, len(samples), batch_size):
        images, labels = batch_arrays(samples[start : start + batch_size])
        cm.update(predict(model, images, scales, flip), labels, ignore_label)
    return cm
