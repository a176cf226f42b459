"""Pipeline orchestration: checkpoint optimisation, tuning, final student and
attack evaluation, with a resumable on-disk artifact store.

Stage layout: ``<out_root>/<run_id>/<stage>/...`` with a ``done.json`` marker
per finished stage (artifact paths + digests + stage metrics). Re-running
skips finished stages unless forced.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .clf_training import (
    ArraySource,
    ClfTrainConfig,
    TrainedClassifier,
    compute_cas,
    evaluate_accuracy,
    train_classifier,
)
from .config import RunConfig, save_config
from .datasets import LabeledDataset, load_dataset
from .gan_training import CheckpointRecord, GanTrainConfig, train_gan
from .nets import (
    ClassifierConfig,
    DiscriminatorConfig,
    GeneratorConfig,
    load_checkpoint,
    save_checkpoint,
)
from .privacy import (
    attack,
    build_attack_dataset,
    mia_report,
    train_attack_models,
    train_shadow_models,
)
from .report import RunReport, emit_report
from .synthesis import GenerationParams, RegeneratingSource
from .tuning import TrialRecord, TunerConfig, rung_epochs, tune

STAGES = ("data", "teacher", "gan", "ckpt_opt", "tuning", "student", "mia", "report")


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class CheckpointCurve:
    points: list  # (epoch, validation CAS); failed checkpoints carry NaN
    teacher_val_accuracy: float | None = None

    @property
    def best_epoch(self) -> int:
        valid = [(e, c) for e, c in self.points if not math.isnan(c)]
        if not valid:
            raise ValueError("no checkpoint produced a CAS value")
        best_cas = max(c for _, c in valid)
        return min(e for e, c in valid if c == best_cas)  # earliest tie wins

    @property
    def best_cas(self) -> float:
        return dict(self.points)[self.best_epoch]


def _stage_seed(cfg: RunConfig, stage: str) -> int:
    digest = hashlib.sha256(f"{cfg.seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _clf_cfg(cfg: RunConfig, epochs: int) -> ClfTrainConfig:
    return ClfTrainConfig(
        epochs=epochs,
        batch_size=cfg.clf_batch_size,
        warmup_epochs=min(cfg.warmup_epochs, max(epochs - 1, 1)),
        weight_decay=cfg.clf_weight_decay,
        augment=cfg.augment,
    )


def _net_cfg(cfg: RunConfig, num_classes: int, channels: int) -> ClassifierConfig:
    return ClassifierConfig(num_classes=num_classes, input_channels=channels,
                            initial_filters=cfg.initial_filters)


def train_student(gen, teacher, params: GenerationParams, strategy: str,
                  base_size: int, val: LabeledDataset, clf_cfg: ClfTrainConfig,
                  net_cfg: ClassifierConfig, seed: int,
                  epoch_callback=None) -> tuple[TrainedClassifier, RegeneratingSource]:
    source = RegeneratingSource(gen, teacher, net_cfg.num_classes, params,
                                strategy, base_size, seed)
    trained = train_classifier(source, clf_cfg, net_cfg, val, seed,
                               epoch_callback=epoch_callback)
    return trained, source


def checkpoint_optimisation(
    checkpoints: list[CheckpointRecord],
    teacher_model,
    base_size: int,
    val: LabeledDataset,
    clf_cfg: ClfTrainConfig,
    net_cfg: ClassifierConfig,
    seed: int,
    teacher_val_accuracy: float | None = None,
    log_fn=None,
) -> CheckpointCurve:
    """Train one default-parameter soft-label student per checkpoint; record
    each validation CAS. A single failed student marks its checkpoint NaN
    without aborting the sweep."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    points = []
    for rec in checkpoints:
        try:
            gen, _ = load_checkpoint(rec.path, "generator")
            trained, _ = train_student(gen, teacher_model, GenerationParams(),
                                       "gkd", base_size, val, clf_cfg, net_cfg,
                                       seed=seed + rec.epoch)
            cas = trained.best_val_accuracy
        except Exception:
            cas = float("nan")
        rec.cas_validation = cas
        points.append((rec.epoch, cas))
        if log_fn is not None:
            log_fn(rec.epoch, cas)
    return CheckpointCurve(points=points, teacher_val_accuracy=teacher_val_accuracy)


def make_student_objective(gen, teacher, base_size: int, val: LabeledDataset,
                           cfg: RunConfig, net_cfg: ClassifierConfig):
    """Tuning objective: train a student under the suggested generation
    parameters, reporting intermediate CAS at the successive-halving rungs."""
    budget = cfg.student_budget_epochs
    rungs = rung_epochs(budget, cfg.tuner.eta)
    intermediate = [e for e in rungs if e < budget]
    clf_cfg = _clf_cfg(cfg, budget)

    def objective(params: dict, trial_seed: int, report) -> float:
        gen_params = GenerationParams(**params)
        best_so_far = {"acc": -1.0}

        def callback(epoch, val_acc):
            best_so_far["acc"] = max(best_so_far["acc"], val_acc)
            if epoch + 1 in intermediate:
                report(intermediate.index(epoch + 1), best_so_far["acc"])

        trained, _ = train_student(gen, teacher, gen_params, "gkd", base_size,
                                   val, clf_cfg, net_cfg, seed=trial_seed % (2**31),
                                   epoch_callback=callback)
        return trained.best_val_accuracy

    return objective


# ---------------------------------------------------------------------------
# Artifact store


def _file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class ArtifactStore:
    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)

    def stage_dir(self, stage: str) -> str:
        path = os.path.join(self.run_dir, stage)
        os.makedirs(path, exist_ok=True)
        return path

    def _marker(self, stage: str) -> str:
        return os.path.join(self.run_dir, stage, "done.json")

    def is_done(self, stage: str) -> bool:
        return os.path.exists(self._marker(stage))

    def read(self, stage: str) -> dict:
        with open(self._marker(stage)) as fh:
            return json.load(fh)

    def finish(self, stage: str, payload: dict):
        artifacts = payload.get("artifacts", {})
        payload["digests"] = {name: _file_digest(path) for name, path in artifacts.items()}
        self.stage_dir(stage)
        tmp = self._marker(stage) + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        os.replace(tmp, self._marker(stage))

    def clear(self, stage: str):
        marker = self._marker(stage)
        if os.path.exists(marker):
            os.unlink(marker)


# ---------------------------------------------------------------------------
# Full pipeline


def run_full_pipeline(cfg: RunConfig, force: bool = False,
                      stop_after: str | None = None, log=print) -> RunReport:
    """Execute every stage, resuming from persisted artifacts when possible."""
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    torch.set_num_threads(max(cfg.workers, 1))

    store = ArtifactStore(cfg.run_dir)
    save_config(cfg, os.path.join(cfg.run_dir, "config.json"))
    timings: dict[str, float] = {}

    def run_stage(stage: str, fn):
        if force:
            store.clear(stage)
        if store.is_done(stage):
            payload = store.read(stage)
            timings[stage] = payload.get("elapsed", 0.0)
            return payload
        if log:
            log(f"[{cfg.run_id}] stage {stage} ...")
        t0 = time.time()
        try:
            payload = fn(store.stage_dir(stage))
        except Exception as exc:
            raise StageError(stage, exc) from exc
        payload["elapsed"] = time.time() - t0
        timings[stage] = payload["elapsed"]
        store.finish(stage, payload)
        return payload

    # --- data
    data_root = os.path.join(cfg.out_root, "_datasets")

    def stage_data(_d):
        train, val, test = load_dataset(cfg.dataset, data_root)
        return {"metrics": {"train_size": len(train), "val_size": len(val),
                            "test_size": len(test), "num_classes": train.num_classes,
                            "channels": train.channels},
                "artifacts": {}}

    data_info = run_stage("data", stage_data)
    train, val, test = load_dataset(cfg.dataset, data_root)
    k, c = train.num_classes, train.channels
    net_cfg = _net_cfg(cfg, k, c)
    report_sections: dict = {"data": data_info["metrics"]}
    if stop_after == "data":
        return _assemble_report(cfg, store, report_sections, timings, partial=True)

    # --- teacher
    def stage_teacher(d):
        teacher_cfg = _clf_cfg(cfg, cfg.teacher_epochs)
        trained = train_classifier(ArraySource(train), teacher_cfg, net_cfg, val,
                                   seed=_stage_seed(cfg, "teacher"))
        path = os.path.join(d, "clf_teacher.ckpt")
        model = trained.build()
        save_checkpoint(path, "classifier", net_cfg, model, step=cfg.teacher_epochs)
        _write_curves(os.path.join(d, "curves.csv"), trained.curves)
        return {"metrics": {"val_accuracy": trained.best_val_accuracy},
                "artifacts": {"checkpoint": path, "curves": os.path.join(d, "curves.csv")}}

    teacher_info = run_stage("teacher", stage_teacher)
    teacher_model, _ = load_checkpoint(teacher_info["artifacts"]["checkpoint"], "classifier")
    teacher_val_acc = teacher_info["metrics"]["val_accuracy"]
    report_sections["teacher"] = teacher_info["metrics"]
    if stop_after == "teacher":
        return _assemble_report(cfg, store, report_sections, timings, partial=True)

    # --- gan
    def stage_gan(d):
        gen_cfg = GeneratorConfig(num_classes=k, channels=c, conv_dim=cfg.conv_dim,
                                  depth=cfg.gan_depth)
        disc_cfg = DiscriminatorConfig(num_classes=k, channels=c, conv_dim=cfg.conv_dim,
                                       depth=cfg.gan_depth)
        records = train_gan(train, gen_cfg, disc_cfg, cfg.gan,
                            seed=_stage_seed(cfg, "gan"), out_dir=d)
        return {"metrics": {"n_checkpoints": len(records)},
                "checkpoints": [{"epoch": r.epoch, "path": r.path} for r in records],
                "artifacts": {f"epoch_{r.epoch:04d}": r.path for r in records}}

    gan_info = run_stage("gan", stage_gan)
    checkpoints = [CheckpointRecord(epoch=r["epoch"], path=r["path"])
                   for r in gan_info["checkpoints"]]
    report_sections["gan"] = gan_info["metrics"]
    if stop_after == "gan":
        return _assemble_report(cfg, store, report_sections, timings, partial=True)

    # --- checkpoint optimisation
    def stage_ckpt_opt(d):
        clf_cfg = _clf_cfg(cfg, cfg.student_budget_epochs)
        curve = checkpoint_optimisation(
            checkpoints, teacher_model, len(train), val, clf_cfg, net_cfg,
            seed=_stage_seed(cfg, "ckpt_opt"), teacher_val_accuracy=teacher_val_acc,
            log_fn=(lambda e, cas: log(f"  checkpoint {e}: CAS {cas:.4f}")) if log else None,
        )
        return {"metrics": {"best_epoch": curve.best_epoch, "best_cas": curve.best_cas},
                "curve": curve.points, "artifacts": {}}

    ckpt_info = run_stage("ckpt_opt", stage_ckpt_opt)
    curve = CheckpointCurve(points=[tuple(p) for p in ckpt_info["curve"]],
                            teacher_val_accuracy=teacher_val_acc)
    best_epoch = ckpt_info["metrics"]["best_epoch"]
    default_cas = ckpt_info["metrics"]["best_cas"]
    best_gen_path = dict((rec.epoch, rec.path) for rec in checkpoints)[best_epoch]
    best_gen, _ = load_checkpoint(best_gen_path, "generator")
    report_sections["ckpt_opt"] = ckpt_info["metrics"]
    if stop_after == "ckpt_opt":
        return _assemble_report(cfg, store, report_sections, timings, partial=True,
                                curve=curve)

    # --- tuning
    def stage_tuning(_d):
        objective = make_student_objective(best_gen, teacher_model, len(train), val,
                                           cfg, net_cfg)
        best_params, records = tune(objective, cfg.tuner, seed=_stage_seed(cfg, "tuning"),
                                    default_value=default_cas)
        best_value = max(t.value for t in records if t.value is not None)
        # the incumbent default parameters stay in force unless a trial beats them
        if best_value < default_cas:
            best_params = asdict(cfg.generation_defaults)
            best_value = default_cas
        return {
            "metrics": {"best_params": best_params, "best_cas": best_value,
                        "delta_cas": best_value - default_cas},
            "trials": [
                {"trial_id": t.trial_id, "params": t.params, "rung_values": t.rung_values,
                 "value": t.value, "status": t.status}
                for t in records
            ],
            "artifacts": {},
        }

    tuning_info = run_stage("tuning", stage_tuning)
    best_params = tuning_info["metrics"]["best_params"]
    report_sections["tuning"] = tuning_info["metrics"]
    trials = tuning_info["trials"]
    if stop_after == "tuning":
        return _assemble_report(cfg, store, report_sections, timings, partial=True,
                                curve=curve, trials=trials)

    # --- final student
    def stage_student(d):
        clf_cfg = _clf_cfg(cfg, cfg.final_student_epochs)
        trained, _ = train_student(best_gen, teacher_model,
                                   GenerationParams(**best_params), "gkd", len(train),
                                   val, clf_cfg, net_cfg,
                                   seed=_stage_seed(cfg, "student"))
        path = os.path.join(d, "clf_student.ckpt")
        save_checkpoint(path, "classifier", net_cfg, trained.build(),
                        step=cfg.final_student_epochs)
        _write_curves(os.path.join(d, "curves.csv"), trained.curves)
        return {"metrics": {"val_cas": trained.best_val_accuracy},
                "artifacts": {"checkpoint": path, "curves": os.path.join(d, "curves.csv")}}

    student_info = run_stage("student", stage_student)
    student_model, _ = load_checkpoint(student_info["artifacts"]["checkpoint"], "classifier")
    report_sections["student"] = student_info["metrics"]
    if stop_after == "student":
        return _assemble_report(cfg, store, report_sections, timings, partial=True,
                                curve=curve, trials=trials)

    # --- membership inference
    def stage_mia(_d):
        seed = _stage_seed(cfg, "mia")
        shadow_cfg = _clf_cfg(cfg, cfg.shadow_epochs)
        shadows = train_shadow_models(val, cfg.n_shadow_models, shadow_cfg, net_cfg, seed)
        per_class = build_attack_dataset(shadows)
        attack_set = train_attack_models(per_class, seed=seed)
        teacher_test_acc = evaluate_accuracy(teacher_model, test)
        student_test_cas = compute_cas(student_model, test)
        teacher_rep = mia_report(
            "teacher", teacher_test_acc, attack(teacher_model, train, test, attack_set, seed))
        student_rep = mia_report(
            "student", student_test_cas, attack(student_model, train, test, attack_set, seed))
        return {"metrics": {"teacher": teacher_rep.to_dict(), "student": student_rep.to_dict()},
                "artifacts": {}}

    mia_info = run_stage("mia", stage_mia)
    report_sections["mia"] = mia_info["metrics"]

    report = _assemble_report(cfg, store, report_sections, timings,
                              partial=False, curve=curve, trials=trials)

    def stage_report(d):
        paths = emit_report(report, d)
        return {"metrics": {}, "artifacts": paths}

    run_stage("report", stage_report)
    return report


def _assemble_report(cfg, store, sections, timings, partial, curve=None, trials=None):
    stages = {}
    for stage in STAGES:
        if store.is_done(stage):
            payload = store.read(stage)
            stages[stage] = {"artifacts": payload.get("artifacts", {}),
                             "digests": payload.get("digests", {})}
    metrics = {
        "teacher_val_accuracy": sections.get("teacher", {}).get("val_accuracy"),
        "best_checkpoint_epoch": sections.get("ckpt_opt", {}).get("best_epoch"),
        "default_params_cas": sections.get("ckpt_opt", {}).get("best_cas"),
        "best_params": sections.get("tuning", {}).get("best_params"),
        "tuned_cas": sections.get("tuning", {}).get("best_cas"),
        "delta_cas": sections.get("tuning", {}).get("delta_cas"),
        "student_val_cas": sections.get("student", {}).get("val_cas"),
        "teacher_mia": sections.get("mia", {}).get("teacher"),
        "student_mia": sections.get("mia", {}).get("student"),
    }
    return RunReport(
        run_id=cfg.run_id,
        config_hash=cfg.config_hash,
        dataset=cfg.dataset,
        profile=cfg.profile,
        seed=cfg.seed,
        partial=partial,
        stages=stages,
        checkpoint_curve=list(curve.points) if curve else [],
        teacher_val_accuracy=(curve.teacher_val_accuracy if curve else
                              metrics["teacher_val_accuracy"]),
        trials=trials or [],
        metrics=metrics,
        timings=dict(timings),
    )


def _write_curves(path: str, curves):
    with open(path, "w") as fh:
        fh.write("epoch,lr,train_loss,val_acc\n")
        for epoch, lr, loss, acc in curves:
            fh.write(f"{epoch},{lr:.8g},{loss:.6g},{acc:.6g}\n")
