"""Classifier training loop shared by teacher, students and shadow models.

The recipe: SGD with nesterov momentum, linear warmup into cosine annealing,
gradient-norm clipping, cross-entropy over probability targets, and the
flip/crop + TrivialAugment + MixUp + label-smoothing stack.

Data comes from a DataSource that is polled at every epoch boundary, so
regenerating synthetic sources can refresh themselves mid-training.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch

from .augment import AugmentConfig, augment_batch
from .datasets import LabeledDataset
from .nets import ClassifierConfig, build_classifier


@dataclass
class ClfTrainConfig:
    epochs: int = 500
    batch_size: int = 256
    lr: float = 0.5
    warmup_epochs: int = 10
    warmup_lr: float = 1e-5
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    clipnorm: float = 1.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mixed_precision: bool = False

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        if self.lr <= self.warmup_lr:
            raise ValueError("peak lr must exceed warmup lr")


class DataSource(Protocol):
    num_classes: int

    def epoch_data(self, epoch: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Images [N, C, 32, 32] and probability labels [N, K] for this epoch."""
        ...


class ArraySource:
    """Fixed DataSource over a LabeledDataset; hard labels become one-hot."""

    def __init__(self, data: LabeledDataset):
        self.num_classes = data.num_classes
        self._images = torch.from_numpy(data.images).permute(0, 3, 1, 2).contiguous()
        self._labels = torch.from_numpy(
            np.eye(data.num_classes, dtype=np.float32)[data.labels]
        )

    def epoch_data(self, epoch: int):
        return self._images, self._labels


@dataclass
class TrainedClassifier:
    state: dict
    config: ClfTrainConfig
    net_config: ClassifierConfig
    best_val_accuracy: float
    curves: list  # (epoch, lr, train_loss, val_acc)

    def build(self) -> torch.nn.Module:
        model = build_classifier(self.net_config)
        model.load_state_dict(self.state)
        model.eval()
        return model


def lr_at(epoch: int, cfg: ClfTrainConfig) -> float:
    """Linear warmup then cosine annealing to zero at the final epoch."""
    e, w, peak = epoch, cfg.warmup_epochs, cfg.lr
    if e < 0 or e > cfg.epochs:
        raise ValueError(f"epoch {e} outside [0, {cfg.epochs}]")
    if e < w:
        return cfg.warmup_lr + (peak - cfg.warmup_lr) * e / w
    return peak * 0.5 * (1.0 + math.cos(math.pi * (e - w) / (cfg.epochs - w)))


def cross_entropy_soft(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy between probability targets and softmax(logits)."""
    return -(targets * torch.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def predict_logits(model: torch.nn.Module, images: np.ndarray,
                   batch_size: int = 512) -> np.ndarray:
    model.eval()
    x = torch.from_numpy(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(model(x[i : i + batch_size]))
    return torch.cat(outs).numpy()


def evaluate_accuracy(model: torch.nn.Module, data: LabeledDataset) -> float:
    """Mean of [argmax(logits) == label]; argmax ties go to the lowest class."""
    logits = predict_logits(model, data.images)
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == data.labels))


def compute_cas(student_model: torch.nn.Module, real_eval: LabeledDataset) -> float:
    """Accuracy of a synthetically trained model on real held-out data.

    Numerically identical to evaluate_accuracy; the name records provenance.
    """
    return evaluate_accuracy(student_model, real_eval)


def train_classifier(
    source: DataSource,
    cfg: ClfTrainConfig,
    net_cfg: ClassifierConfig,
    val: LabeledDataset,
    seed: int,
    epoch_callback=None,
) -> TrainedClassifier:
    """Train for cfg.epochs, tracking the best-validation snapshot.

    epoch_callback(epoch, val_acc) is invoked after each epoch and may raise
    to stop early (used by trial pruning).
    """
    if len(val) == 0:
        raise ValueError("validation set is empty")
    torch.manual_seed(seed)
    model = build_classifier(net_cfg)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.warmup_lr, momentum=cfg.momentum,
                          nesterov=cfg.nesterov, weight_decay=cfg.weight_decay)

    best_acc = -1.0
    best_state = copy.deepcopy(model.state_dict())
    curves = []
    for epoch in range(cfg.epochs):
        images, labels = source.epoch_data(epoch)
        if len(images) == 0:
            raise ValueError("data source yielded an empty dataset")
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr

        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch]))
        order = rng.permutation(len(images))
        batch = min(cfg.batch_size, len(images))
        model.train()
        total_loss, n_batches = 0.0, 0
        for start in range(0, len(order) - batch + 1, batch):
            idx = torch.from_numpy(order[start : start + batch])
            x, y = augment_batch(images[idx], labels[idx], cfg.augment, rng)
            logits = model(x)
            loss = cross_entropy_soft(logits, y)
            if not torch.isfinite(loss):
                raise ValueError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clipnorm)
            opt.step()
            total_loss += loss.item()
            n_batches += 1

        val_acc = evaluate_accuracy(model, val)
        curves.append((epoch, lr, total_loss / max(n_batches, 1), val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = copy.deepcopy(model.state_dict())
        if epoch_callback is not None:
            epoch_callback(epoch, val_acc)

    return TrainedClassifier(state=best_state, config=cfg, net_config=net_cfg,
                             best_val_accuracy=best_acc, curves=curves)
