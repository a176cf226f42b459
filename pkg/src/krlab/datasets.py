"""Dataset ingestion, caching, procedural toy data and shadow-model splits.

All datasets are normalized to 32x32 images with values in [0, 1] and
integer class labels. Splits are cached on disk as ``<root>/<name>/<split>.bin``
(numpy container) plus a ``meta.json`` record so repeated loads are
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

SPLITS = ("train", "val", "test")
IMAGE_SIZE = 32


class DatasetError(Exception):
    """Unknown name, bad files, or split sizes that disagree with the registry."""


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    num_classes: int
    channels: int
    train_size: int
    val_size: int
    test_size: int

    @property
    def total(self) -> int:
        return self.train_size + self.val_size + self.test_size

    def split_size(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]


@dataclass
class LabeledDataset:
    """Images [N, 32, 32, C] in [0, 1] with integer labels in [0, K)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str
    name: str

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1:3] != (IMAGE_SIZE, IMAGE_SIZE):
            raise DatasetError(f"expected [N, 32, 32, C] images, got {self.images.shape}")
        if self.images.shape[3] not in (1, 3):
            raise DatasetError(f"expected 1 or 3 channels, got {self.images.shape[3]}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise DatasetError("empty dataset or image/label length mismatch")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError("labels out of range")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise DatasetError(f"pixel values outside [0, 1]: [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return int(self.images.shape[3])

    def subset(self, indices: np.ndarray, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            split=split or self.split,
            name=self.name,
        )


@dataclass
class ShadowSplit:
    """Disjoint member/holdout/nonmember partition of a validation set."""

    member_part: LabeledDataset
    holdout_part: LabeledDataset
    nonmember_part: LabeledDataset
    seed: int


# Class counts for the MedMNIST-derived entries follow the upstream v2
# metadata where the published table disagrees with it.
_BUILTIN_SPECS = [
    DatasetSpec("CIFAR10", 10, 3, 40000, 10000, 10000),
    DatasetSpec("CIFAR100", 100, 3, 40000, 10000, 10000),
    DatasetSpec("FashionMNIST", 10, 1, 50000, 10000, 10000),
    DatasetSpec("BloodMNIST", 8, 3, 11959, 1712, 3421),
    DatasetSpec("DermaMNIST", 7, 3, 7007, 1003, 2005),
    DatasetSpec("OrganCMNIST", 11, 1, 12975, 2392, 8216),
    DatasetSpec("OrganSMNIST", 11, 1, 13932, 2452, 8827),
    DatasetSpec("PneumoniaMNIST", 2, 1, 4708, 524, 624),
    DatasetSpec("RetinaMNIST", 5, 3, 1080, 120, 400),
]
_BUILTIN = {s.name: s for s in _BUILTIN_SPECS}

# name -> (spec, generator_seed) for procedurally generated datasets
_TOY_REGISTRY: dict[str, tuple[DatasetSpec, int]] = {}


def get_spec(name: str) -> DatasetSpec:
    if name in _BUILTIN:
        return _BUILTIN[name]
    if name in _TOY_REGISTRY:
        return _TOY_REGISTRY[name][0]
    raise DatasetError(f"unknown dataset {name!r}")


def registered_names() -> list[str]:
    return sorted(_BUILTIN) + sorted(_TOY_REGISTRY)


def register_toy_dataset(spec: DatasetSpec, generator_seed: int) -> str:
    """Register a deterministic procedural dataset; returns its name."""
    if spec.name in _BUILTIN:
        raise DatasetError(f"{spec.name!r} collides with a built-in dataset")
    if spec.name in _TOY_REGISTRY and _TOY_REGISTRY[spec.name] != (spec, generator_seed):
        raise DatasetError(f"{spec.name!r} is already registered with a different spec")
    if min(spec.train_size, spec.val_size, spec.test_size) <= 0:
        raise DatasetError("all split sizes must be positive")
    if spec.num_classes < 2 or spec.num_classes > 6:
        raise DatasetError("toy datasets support 2..6 classes")
    _TOY_REGISTRY[spec.name] = (spec, generator_seed)
    return spec.name


def _default_toy_spec() -> DatasetSpec:
    return DatasetSpec("toy-shapes", 3, 3, 3000, 600, 600)


def _ensure_default_toy():
    if "toy-shapes" not in _TOY_REGISTRY:
        register_toy_dataset(_default_toy_spec(), generator_seed=0)


_ensure_default_toy()


# ---------------------------------------------------------------------------
# Procedural shape rendering


# Class -> shape assignment order. The rotation-invariant shapes come first
# so low class counts get well-separated classes; square and diamond (which
# only differ by orientation) are last and rendered with limited rotation.
_SHAPE_ORDER = (0, 3, 4, 5, 1, 2)  # disk, ring, cross, stripes, square, diamond


def _render_shape(rng: np.random.Generator, shape_id: int, channels: int) -> np.ndarray:
    """One 32x32 image of a geometric shape with pose/colour/noise jitter."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float32)
    cx = rng.uniform(10, 22)
    cy = rng.uniform(10, 22)
    r = rng.uniform(5, 10)
    shape_id = _SHAPE_ORDER[shape_id % 6]
    # square/diamond differ only by orientation, so their pose jitter stays
    # well below 45 degrees; the other shapes tolerate arbitrary rotation
    theta = rng.uniform(-np.pi / 8, np.pi / 8) if shape_id in (1, 2) \
        else rng.uniform(0, 2 * np.pi)
    dx = xx - cx
    dy = yy - cy
    # rotate the local frame
    rx = np.cos(theta) * dx - np.sin(theta) * dy
    ry = np.sin(theta) * dx + np.cos(theta) * dy
    if shape_id == 0:  # disk
        mask = dx * dx + dy * dy <= r * r
    elif shape_id == 1:  # square
        mask = np.maximum(np.abs(rx), np.abs(ry)) <= r * 0.85
    elif shape_id == 2:  # diamond
        mask = np.abs(rx) + np.abs(ry) <= r * 1.15
    elif shape_id == 3:  # ring
        d2 = dx * dx + dy * dy
        mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    elif shape_id == 4:  # cross
        mask = (np.abs(rx) <= r * 0.35) | (np.abs(ry) <= r * 0.35)
        mask &= np.maximum(np.abs(rx), np.abs(ry)) <= r
    else:  # stripes
        mask = (np.mod(rx, r * 0.8) <= r * 0.4) & (dx * dx + dy * dy <= r * r)

    bg = rng.uniform(0.0, 0.4)
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, channels), bg, dtype=np.float32)
    fg = rng.uniform(0.45, 1.0, size=channels).astype(np.float32)
    img[mask] = fg
    # heavy pixel noise keeps the task from being trivially separable, so
    # trained models retain a member/nonmember generalization gap
    img += rng.normal(0.0, 0.22, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


# Fraction of samples whose observed label is resampled uniformly. The
# resulting Bayes error keeps toy tasks from being perfectly separable, so
# trained models keep a measurable member/nonmember generalization gap.
_TOY_LABEL_AMBIGUITY = 0.12


def _generate_toy(spec: DatasetSpec, generator_seed: int) -> dict[str, LabeledDataset]:
    out = {}
    for i, split in enumerate(SPLITS):
        n = spec.split_size(split)
        rng = np.random.default_rng(np.random.SeedSequence([generator_seed, i]))
        true = rng.integers(0, spec.num_classes, size=n)
        images = np.stack([_render_shape(rng, int(c), spec.channels) for c in true])
        flip = rng.random(n) < _TOY_LABEL_AMBIGUITY
        labels = np.where(flip, rng.integers(0, spec.num_classes, size=n), true)
        out[split] = LabeledDataset(images, labels, spec.num_classes, split, spec.name)
    return out


# ---------------------------------------------------------------------------
# Real-source ingestion (torchvision / MedMNIST); exercised only when the
# source files are available under the cache root.


def _resize_bilinear(images: np.ndarray) -> np.ndarray:
    if images.shape[1:3] == (IMAGE_SIZE, IMAGE_SIZE):
        return images
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(images).permute(0, 3, 1, 2)
    t = F.interpolate(t, size=(IMAGE_SIZE, IMAGE_SIZE), mode="bilinear", align_corners=False)
    return t.permute(0, 2, 3, 1).clamp(0, 1).numpy()


def _ingest_real(spec: DatasetSpec, root: str) -> dict[str, LabeledDataset]:
    name = spec.name
    src = os.path.join(root, "_sources")
    if name in ("CIFAR10", "CIFAR100", "FashionMNIST"):
        import torchvision.datasets as tvd

        cls = {"CIFAR10": tvd.CIFAR10, "CIFAR100": tvd.CIFAR100, "FashionMNIST": tvd.FashionMNIST}[name]
        try:
            tr = cls(src, train=True, download=True)
            te = cls(src, train=False, download=True)
        except Exception as exc:
            raise DatasetError(f"could not obtain source files for {name}: {exc}") from exc
        x_tr = np.asarray(tr.data)
        x_te = np.asarray(te.data)
        y_tr = np.asarray(tr.targets)
        y_te = np.asarray(te.targets)
    else:
        try:
            import medmnist
            from medmnist import INFO
        except ImportError as exc:
            raise DatasetError(f"{name} requires the medmnist package: {exc}") from exc
        key = name.lower()
        info = INFO[key]
        upstream_classes = len(info["label"])
        if upstream_classes != spec.num_classes:
            warnings.warn(
                f"{name}: registry lists {spec.num_classes} classes but upstream "
                f"metadata says {upstream_classes}; using upstream"
            )
        cls = getattr(medmnist, info["python_class"])
        parts = {s: cls(split=s, root=src, download=True) for s in ("train", "val", "test")}
        x_tr = np.concatenate([np.asarray(parts["train"].imgs)])
        y_tr = np.asarray(parts["train"].labels).reshape(-1)
        x_va = np.asarray(parts["val"].imgs)
        y_va = np.asarray(parts["val"].labels).reshape(-1)
        x_te = np.asarray(parts["test"].imgs)
        y_te = np.asarray(parts["test"].labels).reshape(-1)
        return _finalize_splits(spec, {"train": (x_tr, y_tr), "val": (x_va, y_va), "test": (x_te, y_te)})

    # torchvision datasets ship train/test only; carve the validation split
    # off the training set with a fixed permutation
    perm = np.random.default_rng(0).permutation(len(x_tr))
    n_train = spec.train_size
    tr_idx, va_idx = perm[:n_train], perm[n_train : n_train + spec.val_size]
    return _finalize_splits(
        spec,
        {
            "train": (x_tr[tr_idx], y_tr[tr_idx]),
            "val": (x_tr[va_idx], y_tr[va_idx]),
            "test": (x_te, y_te),
        },
    )


def _finalize_splits(spec: DatasetSpec, raw: dict) -> dict[str, LabeledDataset]:
    out = {}
    for split, (x, y) in raw.items():
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[..., None]
        x = x.astype(np.float32) / 255.0
        x = _resize_bilinear(x)
        n_expected = spec.split_size(split)
        if len(x) != n_expected:
            raise DatasetError(f"{spec.name} {split}: got {len(x)} samples, registry expects {n_expected}")
        k = max(spec.num_classes, int(np.max(y)) + 1)
        out[split] = LabeledDataset(x, y, k, split, spec.name)
    return out


# ---------------------------------------------------------------------------
# Disk cache


def _meta_path(root: str, name: str) -> str:
    return os.path.join(root, name, "meta.json")


def _split_path(root: str, name: str, split: str) -> str:
    return os.path.join(root, name, f"{split}.bin")


def _spec_hash(spec: DatasetSpec, seed: int | None) -> str:
    payload = json.dumps({"spec": asdict(spec), "seed": seed}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _atomic_write(path: str, write_fn):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_cache(root: str, spec: DatasetSpec, seed: int | None, splits: dict[str, LabeledDataset]):
    for split, ds in splits.items():
        _atomic_write(
            _split_path(root, spec.name, split),
            lambda fh, ds=ds: np.savez(fh, images=ds.images, labels=ds.labels),
        )
    meta = {
        "name": spec.name,
        "spec": asdict(spec),
        "num_classes": splits["train"].num_classes,
        "generator_seed": seed,
        "spec_hash": _spec_hash(spec, seed),
    }
    _atomic_write(_meta_path(root, spec.name), lambda fh: fh.write(json.dumps(meta, indent=2).encode()))


def _read_cache(root: str, spec: DatasetSpec, seed: int | None):
    meta_path = _meta_path(root, spec.name)
    if not os.path.exists(meta_path):
        return None
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("spec_hash") != _spec_hash(spec, seed):
        return None
    out = {}
    for split in SPLITS:
        path = _split_path(root, spec.name, split)
        if not os.path.exists(path):
            return None
        with np.load(path) as z:
            out[split] = LabeledDataset(
                z["images"], z["labels"], int(meta["num_classes"]), split, spec.name
            )
    return out


def load_dataset(name: str, root: str) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Return (train, val, test), materializing and caching on first use."""
    spec = get_spec(name)
    seed = _TOY_REGISTRY[name][1] if name in _TOY_REGISTRY else None
    cached = _read_cache(root, spec, seed)
    if cached is None:
        if name in _TOY_REGISTRY:
            cached = _generate_toy(spec, seed)
        else:
            cached = _ingest_real(spec, root)
        _write_cache(root, spec, seed, cached)
        cached = _read_cache(root, spec, seed)
        assert cached is not None
    return cached["train"], cached["val"], cached["test"]


# ---------------------------------------------------------------------------
# Shadow-model resplitting


def shadow_split_sizes(n: int) -> tuple[int, int, int]:
    """(member, holdout, nonmember) sizes for the 45/10/45 rule.

    Both 45% parts round to nearest; the 10% holdout absorbs the remainder,
    keeping member and nonmember counts balanced.
    """
    if n < 20:
        raise DatasetError(f"need at least 20 samples to split, got {n}")
    n_member = int(math.floor(0.45 * n + 0.5))
    n_nonmember = n_member
    n_holdout = n - n_member - n_nonmember
    if n_holdout < 1 or n_member < 1:
        raise DatasetError(f"cannot give every shadow part at least one sample from n={n}")
    return n_member, n_holdout, n_nonmember


def make_shadow_split(val: LabeledDataset, seed: int) -> ShadowSplit:
    """Shuffle with `seed`, then partition 45/10/45 into disjoint parts."""
    n = len(val)
    n_member, n_holdout, n_nonmember = shadow_split_sizes(n)
    perm = np.random.default_rng(seed).permutation(n)
    member = perm[:n_member]
    holdout = perm[n_member : n_member + n_holdout]
    nonmember = perm[n_member + n_holdout :]
    assert len(nonmember) == n_nonmember
    return ShadowSplit(
        member_part=val.subset(member, split="train"),
        holdout_part=val.subset(holdout, split="val"),
        nonmember_part=val.subset(nonmember, split="test"),
        seed=seed,
    )
