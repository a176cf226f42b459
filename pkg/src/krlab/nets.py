"""Network families: conditional generator, projection discriminator, ResNet14.

Two profiles are provided: "full" matches the reference recipe sizes, "tiny"
is a down-scaled variant for desk-scale runs. Semantics are identical across
profiles; only widths differ.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import spectral_norm

CHECKPOINT_VERSION = 1


@dataclass
class GeneratorConfig:
    num_classes: int
    channels: int = 3
    latent_dim: int = 128
    shared_embedding_dim: int = 128
    conv_dim: int = 128
    depth: int = 2  # residual blocks per resolution stage
    attention_resolution: int = 16

    def __post_init__(self):
        if self.latent_dim <= 0 or self.conv_dim <= 0 or self.num_classes <= 0:
            raise ValueError("latent_dim, conv_dim and num_classes must be positive")

    @classmethod
    def tiny(cls, num_classes: int, channels: int = 3) -> "GeneratorConfig":
        return cls(num_classes=num_classes, channels=channels, conv_dim=8, depth=1)


@dataclass
class DiscriminatorConfig:
    num_classes: int
    channels: int = 3
    conv_dim: int = 128
    depth: int = 2
    attention_resolution: int = 16
    spectral_normalization: bool = True

    def __post_init__(self):
        if self.conv_dim <= 0:
            raise ValueError("conv_dim must be positive")

    @classmethod
    def tiny(cls, num_classes: int, channels: int = 3) -> "DiscriminatorConfig":
        return cls(num_classes=num_classes, channels=channels, conv_dim=8, depth=1)


@dataclass
class ClassifierConfig:
    num_classes: int
    input_channels: int = 3
    initial_filters: int = 64

    def __post_init__(self):
        if self.initial_filters <= 0:
            raise ValueError("initial_filters must be positive")

    @classmethod
    def tiny(cls, num_classes: int, input_channels: int = 3) -> "ClassifierConfig":
        return cls(num_classes=num_classes, input_channels=input_channels, initial_filters=8)


def _maybe_sn(module: nn.Module, enabled: bool = True) -> nn.Module:
    return spectral_norm(module) if enabled else module


def _orthogonal_init(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, nn.Embedding)):
            nn.init.orthogonal_(m.weight if not hasattr(m, "weight_orig") else m.weight_orig)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)


class ConditionalBatchNorm(nn.Module):
    """BatchNorm whose per-channel gain and bias are linear in the condition vector."""

    def __init__(self, num_features: int, cond_dim: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(num_features, affine=False)
        self.gain = nn.Linear(cond_dim, num_features, bias=False)
        self.bias = nn.Linear(cond_dim, num_features, bias=False)

    def forward(self, x, cond):
        out = self.bn(x)
        g = (1.0 + self.gain(cond)).unsqueeze(-1).unsqueeze(-1)
        b = self.bias(cond).unsqueeze(-1).unsqueeze(-1)
        return out * g + b


class SelfAttention(nn.Module):
    def __init__(self, channels: int, sn: bool = True):
        super().__init__()
        inner = max(channels // 8, 1)
        self.theta = _maybe_sn(nn.Conv2d(channels, inner, 1, bias=False), sn)
        self.phi = _maybe_sn(nn.Conv2d(channels, inner, 1, bias=False), sn)
        self.g = _maybe_sn(nn.Conv2d(channels, max(channels // 2, 1), 1, bias=False), sn)
        self.out = _maybe_sn(nn.Conv2d(max(channels // 2, 1), channels, 1, bias=False), sn)
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        b, c, h, w = x.shape
        theta = self.theta(x).flatten(2)                      # [B, ci, HW]
        phi = F.max_pool2d(self.phi(x), 2).flatten(2)         # [B, ci, HW/4]
        g = F.max_pool2d(self.g(x), 2).flatten(2)             # [B, c/2, HW/4]
        attn = torch.softmax(torch.bmm(theta.transpose(1, 2), phi), dim=-1)
        o = torch.bmm(g, attn.transpose(1, 2)).reshape(b, -1, h, w)
        return x + self.gamma * self.out(o)


class GBlock(nn.Module):
    """Bottleneck generator block with class-conditional BN; optional 2x upsample."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, upsample: bool):
        super().__init__()
        hidden = max(in_ch // 4, 4)
        self.upsample = upsample
        self.out_ch = out_ch
        self.bn1 = ConditionalBatchNorm(in_ch, cond_dim)
        self.conv1 = _maybe_sn(nn.Conv2d(in_ch, hidden, 1))
        self.bn2 = ConditionalBatchNorm(hidden, cond_dim)
        self.conv2 = _maybe_sn(nn.Conv2d(hidden, hidden, 3, padding=1))
        self.bn3 = ConditionalBatchNorm(hidden, cond_dim)
        self.conv3 = _maybe_sn(nn.Conv2d(hidden, hidden, 3, padding=1))
        self.bn4 = ConditionalBatchNorm(hidden, cond_dim)
        self.conv4 = _maybe_sn(nn.Conv2d(hidden, out_ch, 1))
        self.skip_conv = (
            _maybe_sn(nn.Conv2d(in_ch, out_ch, 1)) if out_ch > in_ch else None
        )

    def forward(self, x, cond):
        h = self.conv1(F.relu(self.bn1(x, cond)))
        h = F.relu(self.bn2(h, cond))
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv2(h)
        h = self.conv3(F.relu(self.bn3(h, cond)))
        h = self.conv4(F.relu(self.bn4(h, cond)))
        if self.skip_conv is not None:
            x = self.skip_conv(x)
        elif self.out_ch < x.shape[1]:
            x = x[:, : self.out_ch]
        return h + x


class Generator(nn.Module):
    """Latent + class label -> 32x32 image in [0, 1] (sigmoid output)."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        w = 4 * cfg.conv_dim
        cond_dim = cfg.latent_dim + cfg.shared_embedding_dim
        self.shared_embed = nn.Embedding(cfg.num_classes, cfg.shared_embedding_dim)
        self.linear = _maybe_sn(nn.Linear(cfg.latent_dim, 4 * 4 * w))
        self.seed_width = w
        blocks = []
        self.attn_index = None
        res = 4
        for _stage in range(3):  # 4 -> 8 -> 16 -> 32
            for d in range(cfg.depth):
                blocks.append(GBlock(w, w, cond_dim, upsample=(d == 0)))
            res *= 2
            if res == cfg.attention_resolution:
                self.attn_index = len(blocks)
        self.blocks = nn.ModuleList(blocks)
        self.attention = SelfAttention(w) if self.attn_index is not None else None
        self.out_bn = nn.BatchNorm2d(w)
        self.out_conv = _maybe_sn(nn.Conv2d(w, cfg.channels, 3, padding=1))
        _orthogonal_init(self)

    def forward(self, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if labels.max() >= self.cfg.num_classes:
            raise ValueError("class label out of range")
        cond = torch.cat([z, self.shared_embed(labels)], dim=1)
        h = self.linear(z).reshape(z.shape[0], self.seed_width, 4, 4)
        for i, block in enumerate(self.blocks):
            h = block(h, cond)
            if self.attention is not None and i + 1 == self.attn_index:
                h = self.attention(h)
        h = self.out_conv(F.relu(self.out_bn(h)))
        return torch.sigmoid(h)


class DBlock(nn.Module):
    """Pre-activation bottleneck discriminator block; optional 2x downsample."""

    def __init__(self, in_ch: int, out_ch: int, downsample: bool, sn: bool = True,
                 first: bool = False):
        super().__init__()
        hidden = max(out_ch // 4, 4)
        self.downsample = downsample
        self.first = first
        self.conv1 = _maybe_sn(nn.Conv2d(in_ch, hidden, 1), sn)
        self.conv2 = _maybe_sn(nn.Conv2d(hidden, hidden, 3, padding=1), sn)
        self.conv3 = _maybe_sn(nn.Conv2d(hidden, hidden, 3, padding=1), sn)
        self.conv4 = _maybe_sn(nn.Conv2d(hidden, out_ch, 1), sn)
        self.skip_conv = _maybe_sn(nn.Conv2d(in_ch, out_ch, 1), sn) if in_ch != out_ch else None

    def forward(self, x):
        h = x if self.first else F.relu(x)
        h = self.conv1(h)
        h = self.conv2(F.relu(h))
        h = self.conv3(F.relu(h))
        h = F.relu(h)
        if self.downsample:
            h = F.avg_pool2d(h, 2)
            x = F.avg_pool2d(x, 2)
        h = self.conv4(h)
        if self.skip_conv is not None:
            x = self.skip_conv(x)
        return h + x


class Discriminator(nn.Module):
    """Image + class label -> scalar logit with projection conditioning."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        sn = cfg.spectral_normalization
        w = cfg.conv_dim
        self.stem = _maybe_sn(nn.Conv2d(cfg.channels, w, 3, padding=1), sn)
        widths = [w, 2 * w, 4 * w]
        blocks = []
        self.attn_index = None
        attn_channels = None
        res = 32
        in_ch = w
        for stage, out_ch in enumerate(widths):
            for d in range(cfg.depth):
                blocks.append(DBlock(in_ch, out_ch, downsample=(d == cfg.depth - 1),
                                     sn=sn, first=(stage == 0 and d == 0)))
                in_ch = out_ch
            res //= 2
            if res == cfg.attention_resolution:
                self.attn_index = len(blocks)
                attn_channels = in_ch
        self.blocks = nn.ModuleList(blocks)
        self.attention = SelfAttention(attn_channels, sn) if self.attn_index is not None else None
        self.linear = _maybe_sn(nn.Linear(in_ch, 1), sn)
        self.embed = _maybe_sn(nn.Embedding(cfg.num_classes, in_ch), sn)
        _orthogonal_init(self)

    def forward(self, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if labels.max() >= self.cfg.num_classes:
            raise ValueError("class label out of range")
        h = self.stem(images)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if self.attention is not None and i + 1 == self.attn_index:
                h = self.attention(h)
        h = F.relu(h).sum(dim=(2, 3))  # global sum pool
        out = self.linear(h).squeeze(1)
        out = out + (self.embed(labels) * h).sum(dim=1)
        return out


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(h + skip)


class ResNet14(nn.Module):
    """Initial conv + 3 stages x 2 basic blocks + linear head = 14 weighted layers."""

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.initial_filters
        self.conv1 = nn.Conv2d(cfg.input_channels, f, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(f)
        stages = []
        in_ch = f
        for i, out_ch in enumerate((f, 2 * f, 4 * f)):
            stride = 1 if i == 0 else 2
            stages.append(BasicBlock(in_ch, out_ch, stride))
            stages.append(BasicBlock(out_ch, out_ch, 1))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(in_ch, cfg.num_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.Linear):
                nn.init.zeros_(m.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[1] != self.cfg.input_channels:
            raise ValueError(
                f"expected {self.cfg.input_channels} input channels, got {images.shape[1]}"
            )
        h = F.relu(self.bn1(self.conv1(images)))
        h = self.stages(h)
        h = h.mean(dim=(2, 3))
        return self.head(h)


def build_generator(cfg: GeneratorConfig) -> Generator:
    return Generator(cfg)


def build_discriminator(cfg: DiscriminatorConfig) -> Discriminator:
    return Discriminator(cfg)


def build_classifier(cfg: ClassifierConfig) -> ResNet14:
    return ResNet14(cfg)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def ema_update(ema_state: dict, live_state: dict, decay: float = 0.9999,
               step: int = 0, start_step: int = 1000) -> dict:
    """ema := live before start_step, else decay * ema + (1 - decay) * live."""
    out = {}
    for key, live in live_state.items():
        ema = ema_state[key]
        if ema.shape != live.shape:
            raise ValueError(f"shape mismatch for {key}: {ema.shape} vs {live.shape}")
        if not live.dtype.is_floating_point or step < start_step:
            out[key] = live.detach().clone()
        else:
            out[key] = decay * ema + (1.0 - decay) * live.detach()
    return out


# ---------------------------------------------------------------------------
# Checkpoint serialization

_CONFIG_TYPES = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "classifier": ClassifierConfig,
}
_BUILDERS = {
    "generator": build_generator,
    "discriminator": build_discriminator,
    "classifier": build_classifier,
}


def save_checkpoint(path: str, kind: str, config, module: nn.Module, step: int = 0,
                    extra: dict | None = None):
    import os
    import tempfile

    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": dataclasses.asdict(config),
        "state": {k: v.cpu() for k, v in module.state_dict().items()},
        "step": step,
        "extra": extra or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    os.close(fd)
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str, kind: str) -> tuple[nn.Module, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION or payload.get("kind") != kind:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {kind} checkpoint")
    cfg = _CONFIG_TYPES[kind](**payload["config"])
    module = _BUILDERS[kind](cfg)
    module.load_state_dict(payload["state"])
    module.eval()
    return module, payload
