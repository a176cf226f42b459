"""Synthetic dataset generation from a frozen generator.

Three strategies:
  * baseline  — one-shot generation, hard conditioning labels as targets;
  * filtered  — keep only samples the teacher agrees with at high confidence;
  * soft-label distillation — label every sample with the teacher's softmax
    output, discarding nothing, and regenerate periodically during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .datasets import IMAGE_SIZE, LabeledDataset

LATENT_DIM = 128
_GEN_BATCH = 256


class GenerationError(Exception):
    pass


@dataclass
class GenerationParams:
    std_dev: float = 1.0
    regeneration_rate: int = 10
    cardinality_scale: int = 1

    def __post_init__(self):
        if not 1.0 <= self.std_dev <= 2.5:
            raise ValueError(f"std_dev must be in [1.0, 2.5], got {self.std_dev}")
        if not 1 <= int(self.regeneration_rate) <= 10:
            raise ValueError("regeneration_rate must be in 1..10")
        if not 1 <= int(self.cardinality_scale) <= 10:
            raise ValueError("cardinality_scale must be in 1..10")
        self.regeneration_rate = int(self.regeneration_rate)
        self.cardinality_scale = int(self.cardinality_scale)


@dataclass
class SoftLabeledDataset:
    images: np.ndarray          # [M, 32, 32, C] in [0, 1]
    soft_labels: np.ndarray     # [M, K] rows sum to 1
    condition_labels: np.ndarray  # [M] hard labels used to condition generation
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.soft_labels = np.asarray(self.soft_labels, dtype=np.float32)
        self.condition_labels = np.asarray(self.condition_labels, dtype=np.int64)
        sums = self.soft_labels.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-5) or np.any(self.soft_labels < 0):
            raise ValueError("soft labels must be non-negative rows summing to 1")

    def __len__(self) -> int:
        return len(self.images)


def sample_latents(count: int, std_dev: float, seed_or_rng) -> np.ndarray:
    """i.i.d. draws from N(0, std_dev^2 I) in the generator latent space."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    return (std_dev * rng.standard_normal((count, LATENT_DIM))).astype(np.float32)


def round_robin_labels(count: int, num_classes: int) -> np.ndarray:
    """Balanced conditioning labels: class c appears ceil/floor(count/K) times."""
    return (np.arange(count) % num_classes).astype(np.int64)


def should_regenerate(epoch: int, rate: int) -> bool:
    if epoch < 0 or rate < 1:
        raise ValueError("epoch must be >= 0 and rate >= 1")
    return epoch % rate == 0


def _generate_images(gen, latents: np.ndarray, labels: np.ndarray) -> np.ndarray:
    gen.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(latents), _GEN_BATCH):
            z = torch.from_numpy(latents[i : i + _GEN_BATCH])
            y = torch.from_numpy(labels[i : i + _GEN_BATCH])
            outs.append(gen(z, y).permute(0, 2, 3, 1).numpy())
    return np.concatenate(outs)


def _teacher_probs(teacher, images: np.ndarray) -> np.ndarray:
    from .clf_training import predict_logits

    logits = predict_logits(teacher, images)
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return (p / p.sum(axis=1, keepdims=True)).astype(np.float32)


def generate_gkd(gen, teacher, num_classes: int, params: GenerationParams,
                 target_size: int, seed: int) -> SoftLabeledDataset:
    """One-pass generation with teacher softmax labels; nothing is discarded."""
    if target_size <= 0:
        raise ValueError("target_size must be positive")
    rng = np.random.default_rng(seed)
    cond = round_robin_labels(target_size, num_classes)
    latents = sample_latents(target_size, params.std_dev, rng)
    images = _generate_images(gen, latents, cond)
    soft = _teacher_probs(teacher, images)
    return SoftLabeledDataset(
        images=images, soft_labels=soft, condition_labels=cond,
        metadata={"strategy": "gkd", "params": asdict(params), "seed": seed,
                  "generated": target_size, "kept": target_size},
    )


def generate_filtered(gen, teacher, num_classes: int, params: GenerationParams,
                      target_size: int, confidence_threshold: float, seed: int,
                      min_accept_rate: float = 1e-3) -> LabeledDataset:
    """Keep samples whose teacher argmax matches the conditioning label with
    confidence >= threshold; loop until target_size are kept."""
    if not (1.0 / num_classes) <= confidence_threshold < 1.0:
        raise ValueError("confidence_threshold must be in [1/K, 1)")
    rng = np.random.default_rng(seed)
    kept_images, kept_labels = [], []
    kept = 0
    generated = 0
    next_class = 0
    while kept < target_size:
        batch = min(_GEN_BATCH, max(target_size - kept, 64))
        cond = ((np.arange(batch) + next_class) % num_classes).astype(np.int64)
        next_class = int((next_class + batch) % num_classes)
        latents = sample_latents(batch, params.std_dev, rng)
        images = _generate_images(gen, latents, cond)
        probs = _teacher_probs(teacher, images)
        preds = probs.argmax(axis=1)
        conf = probs.max(axis=1)
        mask = (preds == cond) & (conf >= confidence_threshold)
        generated += batch
        if mask.any():
            kept_images.append(images[mask])
            kept_labels.append(cond[mask])
            kept += int(mask.sum())
        if generated >= 1000 and kept / generated < min_accept_rate:
            raise GenerationError(
                f"acceptance rate {kept}/{generated} below floor {min_accept_rate}; "
                "generator/teacher pair looks degenerate"
            )
    images = np.concatenate(kept_images)[:target_size]
    labels = np.concatenate(kept_labels)[:target_size]
    ds = LabeledDataset(images, labels, num_classes, split="train", name="synthetic-filtered")
    ds.generated_count = generated  # generated-to-kept ledger for diagnostics
    ds.kept_count = target_size
    return ds


def generate_baseline(gen, num_classes: int, size: int, seed: int) -> LabeledDataset:
    """One-shot generation at std 1.0; conditioning labels are the targets."""
    params = GenerationParams(std_dev=1.0)
    rng = np.random.default_rng(seed)
    cond = round_robin_labels(size, num_classes)
    latents = sample_latents(size, params.std_dev, rng)
    images = _generate_images(gen, latents, cond)
    return LabeledDataset(images, cond, num_classes, split="train", name="synthetic-baseline")


class RegeneratingSource:
    """DataSource over a frozen generator/teacher pair.

    Refreshes the synthetic dataset at every epoch where
    epoch % regeneration_rate == 0 (including epoch 0). The baseline strategy
    generates once and never refreshes.
    """

    def __init__(self, gen, teacher, num_classes: int, params: GenerationParams,
                 strategy: str, base_size: int, seed: int,
                 confidence_threshold: float = 0.5):
        if strategy not in ("gkd", "baseline", "filtered"):
            raise ValueError(f"unknown strategy {strategy!r}")
        self.gen = gen
        self.teacher = teacher
        self.num_classes = num_classes
        self.params = params
        self.strategy = strategy
        self.target_size = base_size * params.cardinality_scale
        self.seed = seed
        self.confidence_threshold = confidence_threshold
        self.generation_events = 0
        self._cache = None

    def _regenerate(self, epoch: int):
        gen_seed = int(np.random.SeedSequence([self.seed, 3, epoch]).generate_state(1)[0])
        if self.strategy == "gkd":
            ds = generate_gkd(self.gen, self.teacher, self.num_classes, self.params,
                              self.target_size, gen_seed)
            images, labels = ds.images, ds.soft_labels
        elif self.strategy == "filtered":
            ds = generate_filtered(self.gen, self.teacher, self.num_classes, self.params,
                                   self.target_size, self.confidence_threshold, gen_seed)
            images = ds.images
            labels = np.eye(self.num_classes, dtype=np.float32)[ds.labels]
        else:
            ds = generate_baseline(self.gen, self.num_classes, self.target_size, gen_seed)
            images = ds.images
            labels = np.eye(self.num_classes, dtype=np.float32)[ds.labels]
        self._cache = (
            torch.from_numpy(images).permute(0, 3, 1, 2).contiguous(),
            torch.from_numpy(labels),
        )
        self.generation_events += 1

    def epoch_data(self, epoch: int):
        refresh = epoch == 0 if self.strategy == "baseline" else should_regenerate(
            epoch, self.params.regeneration_rate)
        if self._cache is None or refresh:
            self._regenerate(epoch)
        return self._cache


def expected_generation_events(epochs: int, rate: int) -> int:
    """Regenerations triggered by a training of `epochs` epochs at `rate`."""
    return math.ceil(epochs / rate)
