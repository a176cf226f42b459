"""Run reports: structured JSON, CSV tables, markdown summary and the
checkpoint-CAS plot, plus recomputation checks for published result tables.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict

from .privacy import aop


class ReportError(Exception):
    pass


@dataclass
class RunReport:
    run_id: str
    config_hash: str
    dataset: str
    profile: str
    seed: int
    partial: bool
    stages: dict
    checkpoint_curve: list  # (epoch, val_cas)
    teacher_val_accuracy: float | None
    trials: list
    metrics: dict
    timings: dict

    def metric_values(self) -> dict:
        """The deterministic result numbers (no timings, no paths)."""
        return {
            "metrics": self.metrics,
            "checkpoint_curve": [list(p) for p in self.checkpoint_curve],
            "trial_values": [[t["trial_id"], t["value"], t["status"]] for t in self.trials],
        }


def emit_report(report: RunReport, out_dir: str, formats=("json", "csv", "markdown", "plot")) -> dict:
    """Write the report in the requested formats; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as fh:
            json.dump(asdict(report), fh, indent=2, sort_keys=True)
        paths["json"] = path

    if "csv" in formats:
        curve_path = os.path.join(out_dir, "cas_curve.csv")
        with open(curve_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint_epoch", "val_cas"])
            for epoch, cas in report.checkpoint_curve:
                w.writerow([epoch, f"{cas:.6f}" if not math.isnan(cas) else ""])
        paths["cas_curve"] = curve_path

        table_path = os.path.join(out_dir, "privacy_table.csv")
        with open(table_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "accuracy", "auc_mia", "aop"])
            for role in ("teacher", "student"):
                rep = report.metrics.get(f"{role}_mia")
                if rep:
                    w.writerow([role, f"{100 * rep['target_accuracy']:.2f}",
                                f"{100 * rep['pooled_auc']:.2f}", f"{100 * rep['aop']:.2f}"])
                else:
                    w.writerow([role, "", "", ""])
        paths["privacy_table"] = table_path

        trials_path = os.path.join(out_dir, "trials.csv")
        with open(trials_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial_id", "std_dev", "regeneration_rate", "cardinality_scale",
                        "value", "status"])
            for t in report.trials:
                p = t["params"]
                w.writerow([t["trial_id"], p.get("std_dev"), p.get("regeneration_rate"),
                            p.get("cardinality_scale"),
                            "" if t["value"] is None else f"{t['value']:.6f}", t["status"]])
        paths["trials"] = trials_path

    if "markdown" in formats:
        path = os.path.join(out_dir, "report.md")
        with open(path, "w") as fh:
            fh.write(_markdown(report))
        paths["markdown"] = path

    if "plot" in formats and report.checkpoint_curve:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 4))
        epochs = [e for e, _ in report.checkpoint_curve]
        cas = [c for _, c in report.checkpoint_curve]
        ax.plot(epochs, cas, "o-", label="validation CAS")
        if report.teacher_val_accuracy is not None:
            ax.axhline(report.teacher_val_accuracy, ls="--", color="grey",
                       label="teacher validation accuracy")
        best = report.metrics.get("best_checkpoint_epoch")
        if best is not None:
            ax.plot([best], [dict(report.checkpoint_curve)[best]], "b*", ms=14,
                    label="selected checkpoint")
        ax.set_xlabel("generator epoch")
        ax.set_ylabel("CAS")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "cas_curve.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths["plot"] = path

    return paths


def _fmt(x, pct=True):
    if x is None:
        return "-"
    return f"{100 * x:.2f}" if pct else f"{x}"


def _markdown(report: RunReport) -> str:
    m = report.metrics
    lines = [
        f"# Run {report.run_id}",
        "",
        f"- dataset: {report.dataset} ({report.profile} profile, seed {report.seed})",
        f"- config hash: `{report.config_hash[:16]}`",
        f"- status: {'partial' if report.partial else 'complete'}",
        "",
        "## Results",
        "",
        "| model | accuracy | auc_mia | aop |",
        "|---|---|---|---|",
    ]
    for role in ("teacher", "student"):
        rep = m.get(f"{role}_mia")
        if rep:
            lines.append(f"| {role} | {_fmt(rep['target_accuracy'])} | "
                         f"{_fmt(rep['pooled_auc'])} | {_fmt(rep['aop'])} |")
        else:
            lines.append(f"| {role} | - | - | - |")
    lines += [
        "",
        f"- best checkpoint epoch: {m.get('best_checkpoint_epoch')}",
        f"- default-params CAS: {_fmt(m.get('default_params_cas'))}",
        f"- tuned CAS: {_fmt(m.get('tuned_cas'))} (delta {_fmt(m.get('delta_cas'))})",
        f"- tuned parameters: {m.get('best_params')}",
        "",
    ]
    return "\n".join(lines)


def load_report(path: str) -> RunReport:
    with open(path) as fh:
        payload = json.load(fh)
    payload["checkpoint_curve"] = [tuple(p) for p in payload["checkpoint_curve"]]
    return RunReport(**payload)


def verify_tables(path: str, tolerance_pp: float = 0.03) -> list[dict]:
    """Recompute AOP for each (accuracy, auc, aop) row of a percent-scale CSV.

    Returns one entry per row with the recomputed value and pass/fail at the
    given percentage-point tolerance.
    """
    if not os.path.exists(path):
        raise ReportError(f"no such file: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ReportError("empty table file")
        fields = {f.lower().strip(): f for f in reader.fieldnames}
        needed = ("accuracy", "auc_mia", "aop")
        if any(n not in fields for n in needed):
            raise ReportError(f"table must have columns {needed}, got {reader.fieldnames}")
        for i, row in enumerate(reader):
            try:
                acc = float(row[fields["accuracy"]]) / 100.0
                auc = float(row[fields["auc_mia"]]) / 100.0
                stated = float(row[fields["aop"]])
            except (ValueError, TypeError) as exc:
                raise ReportError(f"malformed row {i}: {row}") from exc
            recomputed = 100.0 * aop(acc, auc)
            rows.append({
                "row": i,
                "label": row.get(fields.get("model", ""), str(i)),
                "stated_aop": stated,
                "recomputed_aop": recomputed,
                "pass": abs(recomputed - stated) <= tolerance_pp,
            })
    if not rows:
        raise ReportError("table file has no data rows")
    return rows
