"""End-to-end acceptance suite.

Fast sections: metric oracles (AOP, AUC), calibration, schedule ledgers,
soft-label invariants, loss/gradient probes, the LR schedule, and tuner
sanity. Slow section: two identical-seed tiny pipeline runs on toy-shapes
plus a three-seed GKD-vs-baseline student comparison.
"""

import csv
import math
import os
import time

import numpy as np
import pytest
import torch

from krlab.clf_training import ClfTrainConfig, compute_cas, lr_at
from krlab.config import make_config
from krlab.datasets import load_dataset, shadow_split_sizes
from krlab.gan_training import (
    checkpoint_epochs,
    hinge_losses,
    logistic_d_loss,
    logistic_g_loss,
)
from krlab.nets import load_checkpoint
from krlab.pipeline import _clf_cfg, run_full_pipeline, train_student
from krlab.privacy import aop, auc
from krlab.synthesis import (
    GenerationParams,
    expected_generation_events,
    generate_gkd,
    should_regenerate,
)
from krlab.tuning import TunerConfig, tune

FIXTURE_TABLE = os.path.join(os.path.dirname(__file__), "fixtures",
                             "reference_privacy_table.csv")


# ---------------------------------------------------------------------------
# 1. AOP oracle: the published 18-row privacy table


def test_aop_reproduces_reference_table():
    t0 = time.time()
    with open(FIXTURE_TABLE) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 18
    for row in rows:
        recomputed = 100.0 * aop(float(row["accuracy"]) / 100.0,
                                 float(row["auc_mia"]) / 100.0)
        assert abs(recomputed - float(row["aop"])) <= 0.03, row["model"]
    assert time.time() - t0 < 1.0


# ---------------------------------------------------------------------------
# 2. Rank AUC equals brute-force pairwise enumeration


def _pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def test_auc_matches_brute_force_exactly():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = np.zeros(n, dtype=int)
        labels[: int(rng.integers(1, n))] = 1
        rng.shuffle(labels)
        # quantized scores guarantee ties appear regularly
        scores = np.round(rng.normal(size=n), 1)
        assert auc(scores, labels) == _pairwise_auc(scores, labels)


# ---------------------------------------------------------------------------
# 3. Null-attack calibration


def test_null_attack_calibration():
    labels = np.concatenate([np.ones(5000, dtype=int), np.zeros(5000, dtype=int)])
    hits = 0
    for rep in range(100):
        rng = np.random.default_rng(rep)
        scores = rng.random(10_000)
        if 0.48 <= auc(scores, labels) <= 0.52:
            hits += 1
    assert hits >= 95


# ---------------------------------------------------------------------------
# 4. Split and schedule ledgers


def test_shadow_split_partition_property():
    rng = np.random.default_rng(0)
    for n in rng.integers(20, 100_000, size=1000):
        n = int(n)
        member, holdout, nonmember = shadow_split_sizes(n)
        assert member + holdout + nonmember == n
        assert member == nonmember
        assert abs(member - 0.45 * n) <= 0.5
        assert holdout >= 1


def test_regeneration_event_ledger():
    for epochs in range(1, 101):
        for rate in range(1, 11):
            simulated = sum(should_regenerate(e, rate) for e in range(epochs))
            assert expected_generation_events(epochs, rate) == math.ceil(epochs / rate)
            assert simulated == math.ceil(epochs / rate)


def test_checkpoint_count_ledger():
    for epochs in range(1, 501):
        assert len(checkpoint_epochs(epochs, 5)) == epochs // 5


# ---------------------------------------------------------------------------
# 5. Soft-label invariants


def test_gkd_soft_label_invariants(tiny_generator, tiny_classifier):
    data = generate_gkd(tiny_generator, tiny_classifier, 3, GenerationParams(),
                        target_size=97, seed=0)
    sums = data.soft_labels.sum(axis=1)
    assert np.all(np.abs(sums - 1.0) <= 1e-5)
    assert np.all(data.soft_labels >= 0.0)
    counts = np.bincount(data.condition_labels, minlength=3)
    assert counts.tolist() == [33, 32, 32]


# ---------------------------------------------------------------------------
# 6. Loss and gradient probes


def test_loss_closed_form_probes():
    zero = torch.zeros(1)
    assert torch.isclose(logistic_d_loss(zero, zero), torch.tensor(2 * math.log(2.0)))
    assert torch.isclose(logistic_g_loss(zero), torch.tensor(math.log(2.0)))
    one = torch.ones(1)
    d0, g0 = hinge_losses(one, -one)
    assert torch.isclose(d0, torch.tensor(0.0))
    d2, _ = hinge_losses(zero, zero)
    assert torch.isclose(d2, torch.tensor(2.0))
    _, g2 = hinge_losses(zero, -2 * one)
    assert torch.isclose(g2, torch.tensor(2.0))
    _, gz = hinge_losses(zero, zero)
    assert torch.isclose(gz, torch.tensor(0.0))


@pytest.mark.parametrize("point", [-1.5, 0.0, 0.7, 2.0])
def test_gradients_match_central_differences(point):
    eps = 1e-4

    def check(fn):
        x = torch.tensor([point], dtype=torch.float64, requires_grad=True)
        fn(x).backward()
        analytic = x.grad.item()
        hi = fn(torch.tensor([point + eps], dtype=torch.float64)).item()
        lo = fn(torch.tensor([point - eps], dtype=torch.float64)).item()
        numeric = (hi - lo) / (2 * eps)
        scale = max(abs(numeric), 1e-8)
        assert abs(analytic - numeric) / scale <= 1e-3

    fixed = torch.zeros(1, dtype=torch.float64)
    check(lambda r: logistic_d_loss(r, fixed, smoothing=0.1))
    check(lambda f: logistic_d_loss(fixed, f, smoothing=0.1))
    check(logistic_g_loss)
    check(lambda r: hinge_losses(r, fixed)[0])
    check(lambda f: hinge_losses(fixed, f)[0])
    check(lambda f: hinge_losses(fixed, f)[1])


# ---------------------------------------------------------------------------
# 7. Learning-rate schedule


@pytest.mark.parametrize("epochs", [100, 500])
def test_lr_schedule_anchor_points(epochs):
    cfg = ClfTrainConfig(epochs=epochs, warmup_epochs=10, lr=0.5, warmup_lr=1e-5)
    assert lr_at(0, cfg) == pytest.approx(1e-5)
    assert lr_at(10, cfg) == pytest.approx(0.5)
    midpoint = 10 + (epochs - 10) // 2
    assert lr_at(midpoint, cfg) == pytest.approx(0.25)
    assert lr_at(epochs, cfg) == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# 8. Tuner sanity on a stub objective


def test_tuner_recovers_stub_optimum():
    cfg = TunerConfig(n_trials=50, n_startup_trials=10)
    lows = {s.name: s.low for s in cfg.space}
    highs = {s.name: s.high for s in cfg.space}
    hits = 0
    for seed in range(20):
        def objective(params, trial_seed, report):
            assert all(lows[k] <= v <= highs[k] for k, v in params.items())
            value = -(params["std_dev"] - 2.0) ** 2
            report(1, value)
            report(2, value)
            return value

        best, records = tune(objective, cfg, seed=seed)
        for record in records:
            assert all(lows[k] <= v <= highs[k] for k, v in record.params.items())
        if abs(best["std_dev"] - 2.0) <= 0.15:
            hits += 1
    assert hits >= 18


# ---------------------------------------------------------------------------
# 9 & 10. Tiny end-to-end runs


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    torch.set_num_threads(1)
    reports = []
    elapsed = []
    for name in ("runA", "runB"):
        cfg = make_config(None, dataset="toy-shapes", profile="tiny", seed=0,
                          out_root=str(tmp_path_factory.mktemp(name)))
        t0 = time.time()
        reports.append((cfg, run_full_pipeline(cfg, log=None)))
        elapsed.append(time.time() - t0)
    return reports, elapsed


def test_e2e_runtime_budget(pipeline_runs):
    _, elapsed = pipeline_runs
    assert elapsed[0] < 4 * 3600


def test_e2e_cas_curve_and_best_checkpoint(pipeline_runs):
    _, report = pipeline_runs[0][0]
    assert len(report.checkpoint_curve) == 6
    assert [e for e, _ in report.checkpoint_curve] == [5, 10, 15, 20, 25, 30]
    best = report.metrics["best_checkpoint_epoch"]
    assert best in {5, 10, 15, 20, 25, 30}
    curve = dict(report.checkpoint_curve)
    finite = {v for v in curve.values() if not math.isnan(v)}
    assert curve[best] == max(finite)


def test_e2e_gkd_matches_baseline(pipeline_runs, toy_data):
    cfg, report = pipeline_runs[0][0]
    from krlab.pipeline import ArtifactStore, _net_cfg

    store = ArtifactStore(cfg.run_dir)
    teacher_path = store.read("teacher")["artifacts"]["checkpoint"]
    best = report.metrics["best_checkpoint_epoch"]
    gen_path = store.read("gan")["artifacts"][f"epoch_{best:04d}"]
    teacher, _ = load_checkpoint(teacher_path, "classifier")
    gen, _ = load_checkpoint(gen_path, "generator")

    train, val, test = toy_data
    clf_cfg = _clf_cfg(cfg, cfg.final_student_epochs)
    net_cfg = _net_cfg(cfg, train.num_classes, train.channels)
    cas = {"gkd": [], "baseline": []}
    for strategy in ("gkd", "baseline"):
        for seed in (11, 12, 13):
            trained, _ = train_student(gen, teacher, GenerationParams(), strategy,
                                       len(train), val, clf_cfg, net_cfg, seed=seed)
            cas[strategy].append(compute_cas(trained.build(), test))
    gkd_median = float(np.median(cas["gkd"]))
    baseline_median = float(np.median(cas["baseline"]))
    assert gkd_median >= baseline_median - 0.01, cas


def test_e2e_student_leaks_no_more_than_teacher(pipeline_runs):
    _, report = pipeline_runs[0][0]
    teacher_auc = report.metrics["teacher_mia"]["pooled_auc"]
    student_auc = report.metrics["student_mia"]["pooled_auc"]
    assert student_auc <= teacher_auc + 0.02


def test_e2e_determinism(pipeline_runs):
    runs, _ = pipeline_runs
    (_, report_a), (_, report_b) = runs
    assert report_a.metric_values() == report_b.metric_values()
