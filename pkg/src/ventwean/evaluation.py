"""Scoring a learned policy against the logged (behavior) policy."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import spearmanr

from .errors import ValidationError
from .mdp import RewardConfig
from .policy import recommend_batch, recommend_indices, write_importances
from .schema import SCHEMA_VERSION

N_GROUPS = 6
GROUP_NAMES = tuple(f"delta{k}" for k in range(N_GROUPS))


@dataclass(frozen=True)
class AdmissionMetrics:
    admission_id: str
    agreement_fraction: float
    vent_accuracy: float
    sed_accuracy: float
    reintubation_count: int
    mean_accumulated_reward: float
    group: int
    n_steps: int


def _logged_indices(transitions):
    return 4 * transitions.actions[:, 0] + transitions.actions[:, 1]


def agreement_fraction(policy, transitions):
    """Share of steps where the recommended joint action equals the logged one."""
    if len(transitions) == 0:
        raise ValidationError("agreement_fraction needs at least one transition")
    rec = recommend_indices(policy, transitions.states)
    return float(np.mean(rec == _logged_indices(transitions)))


def deviation_group(deviation):
    """0 for exact agreement, else 1..5 over equal-width bins of (0, 1]."""
    if not 0.0 <= deviation <= 1.0:
        raise ValidationError(f"deviation {deviation} outside [0, 1]")
    if deviation == 0.0:
        return 0
    return min(max(int(math.ceil(round(deviation * 5.0, 12))), 1), 5)


def deviation_groups(metrics):
    """Group index per admission from ``1 - agreement_fraction``."""
    return [deviation_group(1.0 - m.agreement_fraction) for m in metrics]


def count_reintubations(episode):
    return max(0, len(episode.vent_intervals) - 1)


def accumulated_reward(transitions, cfg=None):
    """Undiscounted mean per-step reward of one admission."""
    if len(transitions) == 0:
        return 0.0
    return float(np.mean(transitions.rewards))


def action_accuracy(policy, transitions, component):
    """Per-transition match rate of the ventilation or sedation component."""
    if len(transitions) == 0:
        raise ValidationError("action_accuracy needs at least one transition")
    col = {"ventilation": 0, "sedation": 1}.get(component)
    if col is None:
        raise ValidationError(f"component must be 'ventilation' or 'sedation', not {component!r}")
    rec = recommend_batch(policy, transitions.states)
    return float(np.mean(rec[:, col] == transitions.actions[:, col]))


def admission_metrics(policy, episode, transitions, cfg=None):
    rec = recommend_batch(policy, transitions.states)
    agree = float(np.mean(np.all(rec == transitions.actions, axis=1)))
    return AdmissionMetrics(
        admission_id=episode.admission_id,
        agreement_fraction=agree,
        vent_accuracy=float(np.mean(rec[:, 0] == transitions.actions[:, 0])),
        sed_accuracy=float(np.mean(rec[:, 1] == transitions.actions[:, 1])),
        reintubation_count=count_reintubations(episode),
        mean_accumulated_reward=accumulated_reward(transitions, cfg),
        group=deviation_group(1.0 - agree),
        n_steps=len(transitions),
    )


def evaluate_admissions(policy, episodes, transitions, cfg=None):
    """Metrics for every episode that has at least one transition."""
    parts = dict(transitions.by_admission())
    out = []
    for ep in episodes:
        ts = parts.get(ep.admission_id)
        if ts is not None and len(ts):
            out.append(admission_metrics(policy, ep, ts, cfg))
    return out


def group_summary(metrics):
    """Per non-empty group: count, mean/quantiles of reintubations and reward."""
    rows = []
    for g in range(N_GROUPS):
        sel = [m for m in metrics if m.group == g]
        if not sel:
            continue
        re = np.array([m.reintubation_count for m in sel], dtype=float)
        rw = np.array([m.mean_accumulated_reward for m in sel])
        row = {"group": GROUP_NAMES[g], "group_index": g, "n_admissions": len(sel)}
        for name, v in (("reintubations", re), ("reward", rw)):
            q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
            row[f"{name}_mean"] = float(v.mean())
            for label, val in zip(("min", "q25", "median", "q75", "max"), q):
                row[f"{name}_{label}"] = float(val)
        rows.append(row)
    return rows


def group_spearman(metrics):
    """Spearman correlation of group index against the group's mean reintubations.

    Returns ``nan`` with fewer than two non-empty groups or constant means.
    """
    rows = group_summary(metrics)
    if len(rows) < 2:
        return float("nan")
    x = [r["group_index"] for r in rows]
    y = [r["reintubations_mean"] for r in rows]
    if len(set(y)) < 2:
        return float("nan")
    return float(spearmanr(x, y).statistic)


def admission_spearman(metrics):
    """Spearman correlation of group index against reintubations over admissions."""
    x = [m.group for m in metrics]
    y = [m.reintubation_count for m in metrics]
    if len(set(x)) < 2 or len(set(y)) < 2:
        return float("nan")
    return float(spearmanr(x, y).statistic)


def _finite_or_none(x):
    return x if x is not None and math.isfinite(x) else None


def build_report(policy, episodes, transitions, cfg=None, out_dir=".", extra=None, header_lines=()):
    """Write the evaluation report files and return the accuracy summary dict.

    Files: ``admission_metrics.csv``, ``group_summary.csv``, ``accuracy.json``
    and ``importances.csv``. ``extra`` entries are merged into the JSON.
    """
    cfg = cfg or RewardConfig()
    metrics = evaluate_admissions(policy, episodes, transitions, cfg)
    if not metrics:
        raise ValidationError("no admissions to evaluate")
    os.makedirs(out_dir, exist_ok=True)
    header = [f"schema_version={SCHEMA_VERSION}", f"reward_hash={cfg.config_hash()}", *header_lines]

    with open(os.path.join(out_dir, "admission_metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        cols = list(asdict(metrics[0]))
        w.writerow(cols)
        for m in metrics:
            d = asdict(m)
            d["group"] = GROUP_NAMES[m.group]
            w.writerow([repr(v) if isinstance(v, float) else v for v in (d[c] for c in cols)])

    summary = group_summary(metrics)
    with open(os.path.join(out_dir, "group_summary.csv"), "w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        cols = list(summary[0])
        w.writerow(cols)
        for row in summary:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in cols)])

    n = sum(m.n_steps for m in metrics)
    acc = {
        "schema_version": SCHEMA_VERSION,
        "reward_hash": cfg.config_hash(),
        "n_admissions": len(metrics),
        "n_transitions": n,
        "ventilation_accuracy": sum(m.vent_accuracy * m.n_steps for m in metrics) / n,
        "sedation_accuracy": sum(m.sed_accuracy * m.n_steps for m in metrics) / n,
        "joint_accuracy": sum(m.agreement_fraction * m.n_steps for m in metrics) / n,
        "ventilation_accuracy_per_admission": float(np.mean([m.vent_accuracy for m in metrics])),
        "sedation_accuracy_per_admission": float(np.mean([m.sed_accuracy for m in metrics])),
        "spearman_group_vs_mean_reintubations": _finite_or_none(group_spearman(metrics)),
        "spearman_group_vs_reintubations_per_admission": _finite_or_none(admission_spearman(metrics)),
    }
    acc.update(extra or {})
    with open(os.path.join(out_dir, "accuracy.json"), "w", encoding="utf-8") as fh:
        json.dump(acc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_importances(policy, os.path.join(out_dir, "importances.csv"))
    return acc


# ------------------------------------------------------------------ replay

@dataclass(frozen=True)
class ReplayResult:
    label: str
    mean_reintubations: float
    mean_reward: float
    per_seed_reintubations: tuple
    per_seed_reward: tuple


def replay_compare(policies, sim_config, patients, n_seeds=20, reward_cfg=None):
    """Replay each policy (``None`` = clinician) on ``patients`` for ``n_seeds``
    noise replicates; returns one :class:`ReplayResult` per label.

    ``policies`` maps labels to simulator policies (state batch -> actions).
    Replicate ``k`` uses the same noise for every policy.
    """
    from .simulate import run_simulation

    out = {}
    for label, pol in policies.items():
        re, rw = [], []
        for rep in range(n_seeds):
            trajs = run_simulation(sim_config, patients, pol, replicate=rep, reward_cfg=reward_cfg)
            re.append(float(np.mean([t.reintubations for t in trajs])))
            rw.append(float(np.mean([t.mean_reward(reward_cfg) for t in trajs])))
        out[label] = ReplayResult(label, float(np.mean(re)), float(np.mean(rw)), tuple(re), tuple(rw))
    return out
