"""Run configuration: profile defaults, file/flag parsing, canonical hashing.

A RunConfig is fully materialized (every stage knob resolved) before any
stage runs, then frozen and hashed; the hash names every downstream
artifact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .augment import AugmentConfig
from .gan_training import GanTrainConfig
from .synthesis import GenerationParams
from .tuning import DEFAULT_SPACE, ParamSpec, TunerConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: str = "toy-shapes"
    profile: str = "tiny"
    seed: int = 0
    out_root: str = ""
    deterministic: bool = True
    workers: int = 1
    teacher_epochs: int = 500
    shadow_epochs: int = 500
    student_budget_epochs: int = 100
    final_student_epochs: int = 500
    warmup_epochs: int = 10
    n_shadow_models: int = 10
    conv_dim: int = 128
    gan_depth: int = 2
    initial_filters: int = 64
    clf_batch_size: int = 256
    clf_weight_decay: float = 5e-4
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    tuner: TunerConfig = field(default_factory=TunerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    generation_defaults: GenerationParams = field(default_factory=GenerationParams)

    def __post_init__(self):
        if not self.out_root:
            self.out_root = os.environ.get("KRLAB_ROOT", os.path.join(os.getcwd(), "krlab_runs"))
        if self.profile not in ("full", "tiny"):
            raise ConfigError(f"unknown profile {self.profile!r}")

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(_hash_payload(self), sort_keys=True).encode()
        ).hexdigest()

    @property
    def run_id(self) -> str:
        return f"{self.dataset}-{self.profile}-s{self.seed}-{self.config_hash[:8]}"

    @property
    def run_dir(self) -> str:
        return os.path.join(self.out_root, self.run_id)


def _hash_payload(cfg: RunConfig) -> dict:
    payload = dataclasses.asdict(cfg)
    payload.pop("out_root")  # storage location does not change results
    payload.pop("workers")
    payload["tuner"]["space"] = [dataclasses.asdict(s) for s in cfg.tuner.space]
    return payload


# The tiny profile is sized for single-core CPU runs; the tuning space caps
# cardinality_scale so no trial costs more than ~2x a default student.
_TINY_SPACE = (
    ParamSpec("std_dev", 1.0, 2.5, integer=False),
    ParamSpec("regeneration_rate", 1, 10, integer=True),
    ParamSpec("cardinality_scale", 1, 2, integer=True),
)

_PROFILE_DEFAULTS = {
    "full": dict(
        teacher_epochs=500, shadow_epochs=500, student_budget_epochs=100,
        final_student_epochs=500, warmup_epochs=10, n_shadow_models=10,
        conv_dim=128, gan_depth=2, initial_filters=64, clf_batch_size=256,
        clf_weight_decay=5e-4,
        gan=dict(epochs=500, checkpoint_every=5),
        tuner=dict(n_trials=50, n_startup_trials=10),
    ),
    "tiny": dict(
        teacher_epochs=60, shadow_epochs=60, student_budget_epochs=20,
        final_student_epochs=20, warmup_epochs=2, n_shadow_models=2,
        conv_dim=8, gan_depth=1, initial_filters=8, clf_batch_size=256,
        # The desk-scale classifiers are too small to benefit from heavy
        # regularisation; leaving it on erases the train/test gap the
        # membership-inference stage is meant to measure, and the per-image
        # augmentation loop dominates CPU time at this scale.
        clf_weight_decay=0.0,
        augment=dict(horizontal_flip=False, padding=0, trivial_augment=False,
                     mixup_alpha=0.0),
        gan=dict(epochs=30, checkpoint_every=5),
        tuner=dict(n_trials=8, n_startup_trials=4, space=_TINY_SPACE),
    ),
}

_NESTED = {
    "gan": GanTrainConfig,
    "tuner": TunerConfig,
    "augment": AugmentConfig,
    "generation_defaults": GenerationParams,
}
_TOP_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def _build_nested(cls, overrides: dict):
    if cls is TunerConfig and "space" in overrides:
        overrides = dict(overrides)
        overrides["space"] = tuple(
            s if isinstance(s, ParamSpec) else ParamSpec(**s) for s in overrides["space"]
        )
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - valid
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def make_config(path: str | None = None, **flags) -> RunConfig:
    """Build a RunConfig from profile defaults, an optional YAML file, then flags.

    Later sources win. Unknown keys and out-of-range values raise ConfigError.
    """
    merged: dict = {}
    if path:
        import yaml

        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a mapping")
        merged.update(loaded)
    merged.update({k: v for k, v in flags.items() if v is not None})

    unknown = set(merged) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    profile = merged.get("profile", "tiny")
    if profile not in _PROFILE_DEFAULTS:
        raise ConfigError(f"unknown profile {profile!r}")
    base = json.loads(json.dumps({k: v for k, v in _PROFILE_DEFAULTS[profile].items()
                                  if not isinstance(v, dict)}))
    nested_base = {k: v for k, v in _PROFILE_DEFAULTS[profile].items() if isinstance(v, dict)}

    final: dict = dict(base)
    for key, value in merged.items():
        if key in _NESTED:
            if not isinstance(value, dict) and not isinstance(value, _NESTED[key]):
                raise ConfigError(f"{key} must be a mapping")
        final[key] = value
    final["profile"] = profile

    for key, cls in _NESTED.items():
        overrides = dict(nested_base.get(key, {}))
        given = final.get(key)
        if isinstance(given, cls):
            final[key] = given
            continue
        if isinstance(given, dict):
            overrides.update(given)
        final[key] = _build_nested(cls, overrides)

    try:
        return RunConfig(**final)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


parse_config = make_config


def save_config(cfg: RunConfig, path: str):
    payload = _hash_payload(cfg)
    payload["out_root"] = cfg.out_root
    payload["workers"] = cfg.workers
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        payload = json.load(fh)
    payload["tuner"]["space"] = tuple(ParamSpec(**s) for s in payload["tuner"]["space"])
    for key, cls in _NESTED.items():
        payload[key] = cls(**payload[key]) if not isinstance(payload[key], cls) else payload[key]
    return RunConfig(**payload)
