"""Classifier-side augmentation: flip/pad-crop, TrivialAugment, MixUp, label smoothing.

All transforms map [0,1]-valued image tensors to [0,1]-valued tensors of the
same shape and work on probability-vector labels, so the same stack serves
hard-label and soft-label (distillation) training. Randomness comes from an
explicit numpy Generator; each data-loading worker owns its own stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF


@dataclass
class AugmentConfig:
    horizontal_flip: bool = True
    padding: int = 2
    trivial_augment: bool = True
    mixup_alpha: float = 0.2
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0 (0 disables MixUp)")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(horizontal_flip=False, padding=0, trivial_augment=False,
                   mixup_alpha=0.0, label_smoothing=0.0)


def smooth_labels(labels: torch.Tensor, eps: float) -> torch.Tensor:
    """(1 - eps) * p + eps / K; rows keep summing to 1."""
    k = labels.shape[-1]
    return (1.0 - eps) * labels + eps / k


def mixup(images: torch.Tensor, labels: torch.Tensor, alpha: float,
          rng: np.random.Generator, lam: float | None = None):
    """Convex-combine the batch with a random permutation of itself.

    lam ~ Beta(alpha, alpha) unless forced explicitly (tests).
    """
    if images.shape[0] < 2:
        raise ValueError("mixup needs a batch of at least 2")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = torch.from_numpy(rng.permutation(images.shape[0]))
    mixed_x = lam * images + (1.0 - lam) * images[perm]
    mixed_y = lam * labels + (1.0 - lam) * labels[perm]
    return mixed_x, mixed_y


# ---------------------------------------------------------------------------
# TrivialAugment


def _adjust_brightness(img, m):
    return img * (1.0 + m)


def _adjust_contrast(img, m):
    mean = img.mean(dim=(-2, -1), keepdim=True)
    return mean + (img - mean) * (1.0 + m)


def _adjust_saturation(img, m):
    if img.shape[0] != 3:
        return img
    gray = img.mean(dim=0, keepdim=True)
    return gray + (img - gray) * (1.0 + m)


def _adjust_sharpness(img, m):
    kernel = torch.full((img.shape[0], 1, 3, 3), 1.0 / 9.0, dtype=img.dtype)
    blurred = F.conv2d(F.pad(img[None], (1, 1, 1, 1), mode="reflect"),
                       kernel, groups=img.shape[0])[0]
    return blurred + (img - blurred) * (1.0 + m)


def _posterize(img, m):
    # m in [0,1] maps to 8..2 retained bits
    bits = int(round(8 - 6 * m))
    levels = 2 ** bits
    return torch.floor(img * (levels - 1) + 0.5) / (levels - 1)


def _solarize(img, m):
    thr = 1.0 - m
    return torch.where(img >= thr, 1.0 - img, img)


def _autocontrast(img, _m):
    lo = img.amin(dim=(-2, -1), keepdim=True)
    hi = img.amax(dim=(-2, -1), keepdim=True)
    scale = torch.where(hi > lo, 1.0 / (hi - lo), torch.ones_like(hi))
    return (img - lo) * scale


def _equalize(img, _m):
    out = img.clone()
    for c in range(img.shape[0]):
        q = torch.clamp((img[c] * 255).long(), 0, 255)
        hist = torch.bincount(q.reshape(-1), minlength=256).float()
        cdf = torch.cumsum(hist, 0)
        cdf = (cdf - cdf.min()) / max(float(cdf.max() - cdf.min()), 1.0)
        out[c] = cdf[q]
    return out


def _rotate(img, m):
    return TF.rotate(img, angle=m * 135.0, interpolation=TF.InterpolationMode.BILINEAR)


def _shear_x(img, m):
    return TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0,
                     shear=[np.degrees(np.arctan(m * 0.3)), 0.0],
                     interpolation=TF.InterpolationMode.BILINEAR)


def _shear_y(img, m):
    return TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0,
                     shear=[0.0, np.degrees(np.arctan(m * 0.3))],
                     interpolation=TF.InterpolationMode.BILINEAR)


def _translate_x(img, m):
    return TF.affine(img, angle=0.0, translate=[int(round(m * 8)), 0], scale=1.0,
                     shear=[0.0, 0.0], interpolation=TF.InterpolationMode.BILINEAR)


def _translate_y(img, m):
    return TF.affine(img, angle=0.0, translate=[0, int(round(m * 8))], scale=1.0,
                     shear=[0.0, 0.0], interpolation=TF.InterpolationMode.BILINEAR)


# (fn, signed): signed transforms get a random sign applied to the magnitude
_TA_CATALOGUE = [
    (lambda img, m: img, False),  # identity
    (_rotate, True),
    (_shear_x, True),
    (_shear_y, True),
    (_translate_x, True),
    (_translate_y, True),
    (_adjust_brightness, True),
    (_adjust_contrast, True),
    (_adjust_saturation, True),
    (_adjust_sharpness, True),
    (_posterize, False),
    (_solarize, False),
    (_autocontrast, False),
    (_equalize, False),
]


def trivial_augment(image: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Apply one transform drawn uniformly from the catalogue at uniform magnitude."""
    idx = int(rng.integers(len(_TA_CATALOGUE)))
    fn, signed = _TA_CATALOGUE[idx]
    m = float(rng.uniform(0.0, 0.9))
    if signed and rng.integers(2):
        m = -m
    return fn(image, m).clamp(0.0, 1.0)


def flip_pad_crop(images: torch.Tensor, padding: int, rng: np.random.Generator,
                  flip: bool = True) -> torch.Tensor:
    """Per-image horizontal flip (p=0.5), reflect-pad, random crop back to 32x32."""
    b, _, h, w = images.shape
    out = images
    if flip:
        mask = torch.from_numpy(rng.integers(2, size=b).astype(bool))
        out = out.clone()
        out[mask] = torch.flip(out[mask], dims=[-1])
    if padding > 0:
        padded = F.pad(out, (padding,) * 4, mode="reflect")
        offs = rng.integers(0, 2 * padding + 1, size=(b, 2))
        crops = [padded[i, :, oy : oy + h, ox : ox + w] for i, (oy, ox) in enumerate(offs)]
        out = torch.stack(crops)
    return out


def augment_batch(images: torch.Tensor, labels: torch.Tensor, cfg: AugmentConfig,
                  rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Full stack in order: flip/pad-crop, TrivialAugment, MixUp, label smoothing."""
    x, y = images, labels
    if cfg.horizontal_flip or cfg.padding > 0:
        x = flip_pad_crop(x, cfg.padding, rng, flip=cfg.horizontal_flip)
    if cfg.trivial_augment:
        x = torch.stack([trivial_augment(img, rng) for img in x])
    if cfg.mixup_alpha > 0 and x.shape[0] >= 2:
        x, y = mixup(x, y, cfg.mixup_alpha, rng)
    if cfg.label_smoothing > 0:
        y = smooth_labels(y, cfg.label_smoothing)
    return x, y
