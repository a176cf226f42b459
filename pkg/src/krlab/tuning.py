"""Generation-parameter search: Tree-structured Parzen Estimator suggestions
with successive-halving (Hyperband-style) pruning at fixed rungs.

The tuner maximizes a scalar objective (validation CAS in the pipeline). The
objective is injected as a callable so cheap stubs can drive the tuner in
tests: objective(params, trial_seed, report) -> float, where report(rung,
value) must be called at each rung and raises TrialPruned when the trial
should stop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm


class TrialPruned(Exception):
    pass


class TuningError(Exception):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    low: float
    high: float
    integer: bool = False


DEFAULT_SPACE = (
    ParamSpec("std_dev", 1.0, 2.5, integer=False),
    ParamSpec("regeneration_rate", 1, 10, integer=True),
    ParamSpec("cardinality_scale", 1, 10, integer=True),
)


@dataclass
class TunerConfig:
    n_trials: int = 50
    n_startup_trials: int = 10
    gamma: float = 0.25
    n_candidates: int = 24
    eta: int = 3
    space: tuple = DEFAULT_SPACE

    def __post_init__(self):
        if self.n_trials < self.n_startup_trials:
            raise ValueError("n_trials must be >= n_startup_trials")


@dataclass
class TrialRecord:
    trial_id: int
    params: dict
    rung_values: list = field(default_factory=list)
    value: float | None = None
    status: str = "running"  # complete | pruned | failed

    @property
    def best_observed(self) -> float | None:
        if self.value is not None:
            return self.value
        return max(self.rung_values) if self.rung_values else None


def rung_epochs(budget: int, eta: int = 3, n_rungs: int = 3) -> list[int]:
    """Geometric rungs ending at the full budget, e.g. 100 -> [11, 33, 100]."""
    out = []
    for i in range(n_rungs - 1, -1, -1):
        out.append(max(1, int(round(budget / eta ** i))))
    return sorted(set(out)) if len(set(out)) == n_rungs else sorted({max(1, e) for e in out})


def _kde_logpdf(x: np.ndarray, centers: np.ndarray, bw: float, spec: ParamSpec) -> np.ndarray:
    """Log density of a Gaussian mixture centered on `centers`; integer params
    use the kernel mass over the unit bin around x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if spec.integer:
        upper = norm.cdf((x[:, None] + 0.5 - centers[None, :]) / bw)
        lower = norm.cdf((x[:, None] - 0.5 - centers[None, :]) / bw)
        dens = np.clip(upper - lower, 1e-12, None).mean(axis=1)
    else:
        z = (x[:, None] - centers[None, :]) / bw
        dens = np.clip(norm.pdf(z).mean(axis=1) / bw, 1e-12, None)
    return np.log(dens)


def _bandwidth(values: np.ndarray, spec: ParamSpec) -> float:
    span = spec.high - spec.low
    scott = float(np.std(values)) * len(values) ** (-0.2)
    return max(scott, 0.05 * span, 1e-3)


def _uniform_draw(spec: ParamSpec, rng: np.random.Generator):
    if spec.integer:
        return int(rng.integers(int(spec.low), int(spec.high) + 1))
    return float(rng.uniform(spec.low, spec.high))


def tpe_suggest(history: list[TrialRecord], space, gamma: float,
                rng: np.random.Generator, n_candidates: int = 24) -> dict:
    """Suggest parameters maximizing the good/bad density ratio per parameter.

    History is split at the gamma-quantile of observed values; with no usable
    history the draw is uniform within bounds.
    """
    scored = [t for t in history if t.best_observed is not None]
    params = {}
    if len(scored) < 2:
        return {s.name: _uniform_draw(s, rng) for s in space}
    scored = sorted(scored, key=lambda t: t.best_observed, reverse=True)
    n_good = max(1, math.ceil(gamma * len(scored)))
    good, bad = scored[:n_good], scored[n_good:]
    for spec in space:
        good_vals = np.array([t.params[spec.name] for t in good], dtype=float)
        bad_vals = np.array([t.params[spec.name] for t in bad], dtype=float)
        if len(bad_vals) == 0:
            params[spec.name] = _uniform_draw(spec, rng)
            continue
        bw_g = _bandwidth(good_vals, spec)
        bw_b = _bandwidth(bad_vals, spec)
        centers = good_vals[rng.integers(len(good_vals), size=n_candidates)]
        cand = centers + bw_g * rng.standard_normal(n_candidates)
        cand = np.clip(cand, spec.low, spec.high)
        if spec.integer:
            cand = np.round(cand)
        score = _kde_logpdf(cand, good_vals, bw_g, spec) - _kde_logpdf(cand, bad_vals, bw_b, spec)
        best = cand[int(np.argmax(score))]
        params[spec.name] = int(best) if spec.integer else float(best)
    return params


def hyperband_prune(value: float, peer_values: list[float], eta: int = 3) -> bool:
    """Prune iff `value` falls below the top-1/eta of peer values at this rung.

    With no peers the trial is kept.
    """
    if not peer_values:
        return False
    n_keep = max(1, math.ceil(len(peer_values) / eta))
    threshold = sorted(peer_values, reverse=True)[n_keep - 1]
    return value < threshold


def tune(objective, cfg: TunerConfig, seed: int,
         default_value: float | None = None) -> tuple[dict, list[TrialRecord]]:
    """Run cfg.n_trials trials; returns (best params, all records).

    The first n_startup_trials are uniform draws, the rest TPE suggestions.
    Rung values are pooled across trials for pruning decisions. The returned
    best params maximize the final value among complete trials (earliest
    trial wins ties). If default_value is given, records carry the
    improvement over it in record.params-independent metadata.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    records: list[TrialRecord] = []
    rung_history: dict[int, list[float]] = {}

    for trial_id in range(cfg.n_trials):
        if trial_id < cfg.n_startup_trials:
            params = {s.name: _uniform_draw(s, rng) for s in cfg.space}
        else:
            params = tpe_suggest(records, cfg.space, cfg.gamma, rng, cfg.n_candidates)
        record = TrialRecord(trial_id=trial_id, params=params)
        records.append(record)

        def report(rung: int, value: float, record=record):
            peers = rung_history.setdefault(rung, [])
            record.rung_values.append(value)
            prune = hyperband_prune(value, peers, cfg.eta)
            peers.append(value)
            if prune:
                raise TrialPruned()

        trial_seed = int(np.random.SeedSequence([seed, 5, trial_id]).generate_state(1)[0])
        try:
            record.value = float(objective(params, trial_seed, report))
            record.status = "complete"
        except TrialPruned:
            record.status = "pruned"
        except Exception:
            record.status = "failed"

    complete = [t for t in records if t.status == "complete" and t.value is not None]
    if not complete:
        raise TuningError("all trials pruned or failed")
    best = max(complete, key=lambda t: (t.value, -t.trial_id))
    return dict(best.params), records
