"""Adversarial training with logistic (or hinge) loss, EMA generator and
periodic checkpointing.

Each generator step runs `d_updates_per_g` discriminator updates first; an
epoch is floor(N / batch) generator steps, so the discriminator cycles
through the shuffled real data several times per epoch.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import LabeledDataset
from .nets import (
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    ema_update,
    save_checkpoint,
)


class GanDivergence(Exception):
    """Raised when a non-finite loss is observed; carries a diagnostic path."""


@dataclass
class GanTrainConfig:
    epochs: int = 500
    batch_size: int = 64
    d_updates_per_g: int = 4
    adversarial_loss: str = "logistic"  # or "hinge"
    d_label_smoothing: float = 0.1
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    d_weight_decay: float = 0.004
    ema_decay: float = 0.9999
    ema_start_step: int = 1000
    checkpoint_every: int = 5
    mixed_precision: bool = False

    def __post_init__(self):
        if self.d_updates_per_g < 1:
            raise ValueError("d_updates_per_g must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.adversarial_loss not in ("logistic", "hinge"):
            raise ValueError("adversarial_loss must be 'logistic' or 'hinge'")


@dataclass
class CheckpointRecord:
    epoch: int
    path: str
    cas_validation: float | None = None


def logistic_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor,
                    smoothing: float = 0.0) -> torch.Tensor:
    """Non-saturating discriminator loss with one-sided real-label smoothing."""
    real_term = (1.0 - smoothing) * F.softplus(-real_logits) + smoothing * F.softplus(real_logits)
    return real_term.mean() + F.softplus(fake_logits).mean()


def logistic_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logits).mean()


def hinge_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor):
    d_loss = F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()
    g_loss = -fake_logits.mean()
    return d_loss, g_loss


def checkpoint_epochs(epochs: int, every: int) -> list[int]:
    """Epochs at which generator checkpoints are written: every `every`
    epochs, counted from 1, so a run of E epochs yields floor(E / every)."""
    if epochs < 1 or every < 1:
        raise ValueError("epochs and every must be >= 1")
    return list(range(every, epochs + 1, every))


class _BatchCycler:
    """Yields reshuffled minibatches of real data indefinitely."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def train_gan(
    train: LabeledDataset,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    cfg: GanTrainConfig,
    seed: int,
    out_dir: str,
    log_fn=None,
) -> list[CheckpointRecord]:
    """Train the conditional GAN, saving EMA-generator checkpoints.

    Returns one CheckpointRecord per `checkpoint_every` epochs.
    """
    if len(train) < cfg.batch_size:
        raise ValueError("training set smaller than one batch")
    os.makedirs(out_dir, exist_ok=True)

    torch.manual_seed(seed)
    gen = build_generator(gen_cfg)
    disc = build_discriminator(disc_cfg)
    ema_state = {k: v.clone() for k, v in gen.state_dict().items()}

    g_opt = torch.optim.Adam(gen.parameters(), lr=cfg.g_lr, betas=(cfg.beta1, cfg.beta2))
    d_opt = torch.optim.AdamW(disc.parameters(), lr=cfg.d_lr, betas=(cfg.beta1, cfg.beta2),
                              weight_decay=cfg.d_weight_decay)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    cycler = _BatchCycler(len(train), cfg.batch_size, rng)
    images = torch.from_numpy(train.images).permute(0, 3, 1, 2).contiguous()
    labels = torch.from_numpy(train.labels)

    steps_per_epoch = len(train) // cfg.batch_size
    k = train.num_classes
    global_step = 0
    d_steps = 0
    records: list[CheckpointRecord] = []
    ckpt_epochs = set(checkpoint_epochs(cfg.epochs, cfg.checkpoint_every))

    def sample_fakes(batch):
        z = torch.from_numpy(
            rng.standard_normal((batch, gen_cfg.latent_dim)).astype(np.float32)
        )
        y = torch.from_numpy(rng.integers(0, k, size=batch))
        return gen(z, y), y

    def check_finite(value: float, stage: str):
        if not np.isfinite(value):
            diag = os.path.join(out_dir, "divergence_snapshot.ckpt")
            save_checkpoint(diag, "generator", gen_cfg, gen, step=global_step,
                            extra={"stage": stage, "loss": value})
            raise GanDivergence(f"non-finite {stage} loss at step {global_step}; snapshot at {diag}")

    for epoch in range(1, cfg.epochs + 1):
        epoch_d_loss = 0.0
        epoch_g_loss = 0.0
        for _ in range(steps_per_epoch):
            # one batched no-grad pass covers the fakes for all D updates
            with torch.no_grad():
                all_fake_x, all_fake_y = sample_fakes(cfg.batch_size * cfg.d_updates_per_g)
            for i in range(cfg.d_updates_per_g):
                idx = cycler.next_indices()
                real_x, real_y = images[idx], labels[idx]
                lo = i * cfg.batch_size
                fake_x = all_fake_x[lo:lo + cfg.batch_size]
                fake_y = all_fake_y[lo:lo + cfg.batch_size]
                real_logits = disc(real_x, real_y)
                fake_logits = disc(fake_x, fake_y)
                if cfg.adversarial_loss == "logistic":
                    d_loss = logistic_d_loss(real_logits, fake_logits, cfg.d_label_smoothing)
                else:
                    d_loss, _ = hinge_losses(real_logits, fake_logits)
                check_finite(d_loss.item(), "discriminator")
                d_opt.zero_grad(set_to_none=True)
                d_loss.backward()
                d_opt.step()
                d_steps += 1
                epoch_d_loss += d_loss.item()

            fake_x, fake_y = sample_fakes(cfg.batch_size)
            fake_logits = disc(fake_x, fake_y)
            if cfg.adversarial_loss == "logistic":
                g_loss = logistic_g_loss(fake_logits)
            else:
                _, g_loss = hinge_losses(fake_logits, fake_logits)
            check_finite(g_loss.item(), "generator")
            g_opt.zero_grad(set_to_none=True)
            g_loss.backward()
            g_opt.step()
            global_step += 1
            epoch_g_loss += g_loss.item()
            ema_state = ema_update(ema_state, gen.state_dict(), cfg.ema_decay,
                                   step=global_step, start_step=cfg.ema_start_step)

        if log_fn is not None:
            log_fn(epoch, epoch_d_loss / max(steps_per_epoch * cfg.d_updates_per_g, 1),
                   epoch_g_loss / max(steps_per_epoch, 1))

        if epoch in ckpt_epochs:
            path = os.path.join(out_dir, f"gan_epoch_{epoch:04d}.ckpt")
            ema_gen = build_generator(gen_cfg)
            ema_gen.load_state_dict(ema_state)
            save_checkpoint(path, "generator", gen_cfg, ema_gen, step=global_step,
                            extra={"epoch": epoch, "ema": True})
            records.append(CheckpointRecord(epoch=epoch, path=path))

    assert d_steps == cfg.d_updates_per_g * global_step
    return records
