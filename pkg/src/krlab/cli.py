"""Command-line surface tying the pipeline stages together.

Exit codes: 0 success, 2 partial result, 3 validation error, 4 stage failure.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from . import datasets as ds
from .config import ConfigError, load_config, make_config
from .nets import load_checkpoint
from .pipeline import StageError, run_full_pipeline
from .report import ReportError, load_report, verify_tables
from .synthesis import GenerationParams, generate_baseline, generate_gkd

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_VALIDATION = 3
EXIT_STAGE_FAILURE = 4


def _root(root: str | None) -> str:
    return root or os.environ.get("KRLAB_ROOT", os.path.join(os.getcwd(), "krlab_runs"))


def _fail_validation(msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(EXIT_VALIDATION)


def _build_config(config_path, **flags):
    try:
        return make_config(config_path, **flags)
    except (ConfigError, FileNotFoundError) as exc:
        _fail_validation(str(exc))


def _run(cfg, stop_after=None, force=False):
    try:
        return run_full_pipeline(cfg, force=force, stop_after=stop_after, log=click.echo)
    except StageError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)


@click.group()
def main():
    """Synthetic-data training pipeline with privacy evaluation."""


_common = [
    click.option("--dataset", default=None, help="registered dataset name"),
    click.option("--profile", default=None, type=click.Choice(["full", "tiny"])),
    click.option("--seed", default=None, type=int),
    click.option("--workers", default=None, type=int),
    click.option("--deterministic/--no-deterministic", default=None),
    click.option("--out", "out_root", default=None, help="output root (default $KRLAB_ROOT)"),
    click.option("--config", "config_path", default=None, type=click.Path()),
    click.option("--force", is_flag=True, default=False, help="recompute finished stages"),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


# --- data ------------------------------------------------------------------


@main.group()
def data():
    """Dataset ingestion and inspection."""


@data.command("fetch")
@click.argument("name")
@click.option("--root", default=None)
def data_fetch(name, root):
    try:
        train, val, test = ds.load_dataset(name, os.path.join(_root(root), "_datasets"))
    except ds.DatasetError as exc:
        _fail_validation(str(exc))
    click.echo(f"{name}: train={len(train)} val={len(val)} test={len(test)} "
               f"classes={train.num_classes} channels={train.channels}")


@data.command("info")
@click.argument("name")
def data_info(name):
    try:
        spec = ds.get_spec(name)
    except ds.DatasetError as exc:
        _fail_validation(str(exc))
    click.echo(json.dumps({
        "name": spec.name, "num_classes": spec.num_classes, "channels": spec.channels,
        "train": spec.train_size, "val": spec.val_size, "test": spec.test_size,
    }, indent=2))


# --- stage commands ---------------------------------------------------------


@main.group()
def clf():
    """Classifier training."""


@clf.command("train-teacher")
@common_options
def clf_train_teacher(config_path, force, **flags):
    cfg = _build_config(config_path, **flags)
    report = _run(cfg, stop_after="teacher", force=force)
    click.echo(json.dumps({"run_id": report.run_id,
                           "teacher_val_accuracy": report.metrics["teacher_val_accuracy"]}))


@main.group()
def gan():
    """Generator training."""


@gan.command("train")
@common_options
def gan_train(config_path, force, **flags):
    cfg = _build_config(config_path, **flags)
    report = _run(cfg, stop_after="gan", force=force)
    click.echo(json.dumps({"run_id": report.run_id,
                           "stages": sorted(report.stages)}))


@main.group()
def pipeline():
    """Full pipeline orchestration."""


@pipeline.command("run")
@common_options
def pipeline_run(config_path, force, **flags):
    cfg = _build_config(config_path, **flags)
    report = _run(cfg, force=force)
    click.echo(json.dumps(report.metric_values(), indent=2, sort_keys=True))
    sys.exit(EXIT_PARTIAL if report.partial else EXIT_OK)


@pipeline.command("resume")
@click.argument("run_id")
@click.option("--root", default=None)
def pipeline_resume(run_id, root):
    config_path = os.path.join(_root(root), run_id, "config.json")
    if not os.path.exists(config_path):
        _fail_validation(f"no run named {run_id} under {_root(root)}")
    cfg = load_config(config_path)
    report = _run(cfg)
    click.echo(json.dumps(report.metric_values(), indent=2, sort_keys=True))
    sys.exit(EXIT_PARTIAL if report.partial else EXIT_OK)


# --- synthesis --------------------------------------------------------------


@main.group()
def synth():
    """Synthetic dataset generation."""


@synth.command("dump")
@click.option("--run", "run_id", required=True)
@click.option("--root", default=None)
@click.option("--strategy", default="gkd", type=click.Choice(["gkd", "baseline"]))
@click.option("--size", default=1000, type=int)
@click.option("--std-dev", default=1.0, type=float)
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
def synth_dump(run_id, root, strategy, size, std_dev, seed, out_path):
    """Write a synthetic dataset from a finished run's selected generator."""
    run_dir = os.path.join(_root(root), run_id)
    try:
        with open(os.path.join(run_dir, "ckpt_opt", "done.json")) as fh:
            best_epoch = json.load(fh)["metrics"]["best_epoch"]
        gen, _ = load_checkpoint(
            os.path.join(run_dir, "gan", f"gan_epoch_{best_epoch:04d}.ckpt"), "generator")
        teacher, _ = load_checkpoint(
            os.path.join(run_dir, "teacher", "clf_teacher.ckpt"), "classifier")
    except (OSError, ValueError, KeyError) as exc:
        _fail_validation(f"run {run_id} is missing generator/teacher artifacts: {exc}")
    params = GenerationParams(std_dev=std_dev)
    k = gen.cfg.num_classes
    if strategy == "gkd":
        out = generate_gkd(gen, teacher, k, params, size, seed)
        arrays = dict(images=out.images, labels=out.condition_labels,
                      soft_labels=out.soft_labels)
    else:
        out = generate_baseline(gen, k, size, seed)
        arrays = dict(images=out.images, labels=out.labels)
    with open(out_path, "wb") as fh:
        np.savez(fh, **arrays)
    click.echo(f"wrote {size} samples to {out_path}")


# --- privacy ----------------------------------------------------------------


@main.group()
def mia():
    """Membership inference evaluation."""


@mia.command("run")
@click.option("--run", "run_id", required=True)
@click.option("--root", default=None)
@click.option("--target", default="student", type=click.Choice(["teacher", "student"]))
def mia_run(run_id, root, target):
    config_path = os.path.join(_root(root), run_id, "config.json")
    if not os.path.exists(config_path):
        _fail_validation(f"no run named {run_id} under {_root(root)}")
    cfg = load_config(config_path)
    report = _run(cfg, stop_after=None)
    click.echo(json.dumps(report.metrics[f"{target}_mia"], indent=2, sort_keys=True))


# --- reporting --------------------------------------------------------------


@main.group()
def report():
    """Report emission and table verification."""


@report.command("emit")
@click.option("--run", "run_id", required=True)
@click.option("--root", default=None)
@click.option("--out", "out_dir", default=None, type=click.Path())
def report_emit(run_id, root, out_dir):
    from .report import emit_report

    path = os.path.join(_root(root), run_id, "report", "report.json")
    if not os.path.exists(path):
        _fail_validation(f"run {run_id} has no emitted report yet")
    rep = load_report(path)
    paths = emit_report(rep, out_dir or os.path.join(_root(root), run_id, "report"))
    click.echo(json.dumps(paths, indent=2))
    sys.exit(EXIT_PARTIAL if rep.partial else EXIT_OK)


@report.command("verify-tables")
@click.argument("table_file", type=click.Path())
def report_verify_tables(table_file):
    try:
        rows = verify_tables(table_file)
    except ReportError as exc:
        _fail_validation(str(exc))
    failures = [r for r in rows if not r["pass"]]
    for r in rows:
        status = "pass" if r["pass"] else "FAIL"
        click.echo(f"{status} {r['label']}: stated {r['stated_aop']:.2f} "
                   f"recomputed {r['recomputed_aop']:.2f}")
    sys.exit(EXIT_OK if not failures else EXIT_STAGE_FAILURE)


if __name__ == "__main__":
    main()
