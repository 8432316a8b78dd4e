"""MDP construction: 32-feature states, joint actions, shaped reward, transitions."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ArtifactError, ParseError
from .schema import (
    DRUG_EQUIVALENCE, DRUG_NAMES, DRUG_OFFSET, FEATURE_INDEX, GRID_MINUTES,
    SCHEMA_VERSION, SEDATION_EDGES, SIGNAL_INDEX, STATE_DIM, STATE_FEATURES,
)

VENT_COL = FEATURE_INDEX["vent_on_flag"]


def _default_stability():
    # One-sided guideline bounds get a far sentinel on the open side.
    return {"heart_rate": (40.0, 130.0), "respiratory_rate": (4.0, 30.0),
            "arterial_ph": (7.3, 7.7)}


def _default_extubation():
    return {"fio2": (0.0, 50.0), "spo2": (88.0, 100.0), "peep_set": (0.0, 8.0)}


@dataclass(frozen=True)
class RewardConfig:
    C1: float = 0.1
    C2: float = 0.2
    C3: float = 10.0
    C4: float = 0.02
    C5: float = 2.5
    C6: float = 0.1
    C7: float = 10.0
    stability_ranges: dict = field(default_factory=_default_stability)
    extubation_ranges: dict = field(default_factory=_default_extubation)
    fluctuation_threshold: float = 0.2
    gamma: float = 0.99
    eps: float = 1e-6

    def __post_init__(self):
        for k in ("C1", "C2", "C3", "C4", "C5", "C6", "C7"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        for name, (lo, hi) in {**self.stability_ranges, **self.extubation_ranges}.items():
            if name not in SIGNAL_INDEX:
                raise ValueError(f"unknown signal {name!r} in reward ranges")
            if not lo < hi:
                raise ValueError(f"range for {name} must have min < max")

    def config_hash(self) -> str:
        d = asdict(self)
        d["stability_ranges"] = {k: list(v) for k, v in sorted(d["stability_ranges"].items())}
        d["extubation_ranges"] = {k: list(v) for k, v in sorted(d["extubation_ranges"].items())}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Action:
    vent_bit: int
    sed_level: int

    def __post_init__(self):
        if self.vent_bit not in (0, 1) or self.sed_level not in (0, 1, 2, 3):
            raise ValueError(f"invalid action {self}")

    @property
    def index(self) -> int:
        return 4 * self.vent_bit + self.sed_level

    @classmethod
    def from_index(cls, k):
        return cls(int(k) // 4, int(k) % 4)


# ------------------------------------------------------------------ sedation

def sedation_level_normalized(drug_id, rate_per_kg):
    """Level for a weight-normalized rate (drug units / kg / h)."""
    if drug_id not in DRUG_EQUIVALENCE:
        raise KeyError(f"unknown drug {drug_id!r}")
    x = rate_per_kg * DRUG_EQUIVALENCE[drug_id]
    return int(np.searchsorted(SEDATION_EDGES, x, side="right"))


def map_sedation_level(drug_id, dose_rate, weight):
    """Map a dose rate (drug units per hour) to a sedation level in 0..3."""
    if dose_rate < 0 or weight <= 0:
        raise ValueError("dose_rate must be >= 0 and weight > 0")
    return sedation_level_normalized(drug_id, dose_rate / weight)


def rate_for_level(drug_id, level, weight):
    """Representative hourly rate placing ``drug_id`` in the middle of ``level``'s bin."""
    if level == 0:
        return 0.0
    edges = SEDATION_EDGES
    target = 0.5 * (edges[level - 1] + edges[level]) if level < len(edges) else 1.4 * edges[-1]
    return target / DRUG_EQUIVALENCE[drug_id] * weight


# ------------------------------------------------------------------- states

def _drug_rate_matrix(episode, times):
    """Per-drug weight-normalized rates averaged over ``[t - 10, t)`` for each t."""
    rates = np.zeros((len(times), len(DRUG_NAMES)))
    lo = times - GRID_MINUTES
    for ev in episode.sedation_events:
        j = DRUG_NAMES.index(ev.drug_id)
        if ev.route == "bolus":
            hit = (ev.start_min >= lo) & (ev.start_min < times)
            rates[hit, j] += ev.dose * (60.0 / GRID_MINUTES)
        else:
            overlap = np.clip(np.minimum(ev.end_min, times) - np.maximum(ev.start_min, lo), 0.0, None)
            rates[:, j] += ev.dose * overlap / GRID_MINUTES
    return rates / episode.weight


def _vent_features(episode, times):
    on = np.zeros(len(times))
    into = np.zeros(len(times))
    since_ext = np.zeros(len(times))
    count = np.zeros(len(times))
    for iv in episode.vent_intervals:
        inside = (times >= iv.start_min) & (times < iv.end_min)
        on[inside] = 1.0
        into[inside] = times[inside] - iv.start_min
        after = times >= iv.end_min
        since_ext[after] = times[after] - iv.end_min
        count += times >= iv.start_min
    since_ext[on > 0] = 0.0
    return on, into, since_ext, count


def _alarm_minutes(signals, times, cfg):
    alarm = np.zeros(len(times), dtype=bool)
    for name, (lo, hi) in cfg.stability_ranges.items():
        v = signals[:, SIGNAL_INDEX[name]]
        alarm |= (v < lo) | (v > hi)
    out = np.empty(len(times))
    last = None
    for k, t in enumerate(times):
        if alarm[k]:
            last = t
        out[k] = t if last is None else t - last
    return out


def episode_states(series, episode, cfg=None):
    """All grid states of one admission as an ``(L, 32)`` array."""
    cfg = cfg or RewardConfig()
    times = np.asarray(series.grid, dtype=float)
    vals = np.asarray(series.values, dtype=float)
    n = len(times)
    S = np.empty((n, STATE_DIM))
    S[:, 0] = episode.age
    S[:, 1] = episode.weight
    S[:, 2] = episode.gender_flag
    S[:, 3] = episode.emergency_flag
    S[:, 4] = episode.white_flag
    S[:, 5:19] = vals[:, :14]
    rates = _drug_rate_matrix(episode, times)
    S[:, DRUG_OFFSET:DRUG_OFFSET + len(DRUG_NAMES)] = rates
    S[:, FEATURE_INDEX["sed_level_current"]] = [
        max(sedation_level_normalized(d, r[j]) for j, d in enumerate(DRUG_NAMES)) for r in rates]
    on, into, since_ext, count = _vent_features(episode, times)
    S[:, VENT_COL] = on
    S[:, FEATURE_INDEX["minutes_into_current_ventilation"]] = into
    S[:, FEATURE_INDEX["minutes_since_last_extubation"]] = since_ext
    S[:, FEATURE_INDEX["num_intubations_so_far"]] = count
    S[:, FEATURE_INDEX["minutes_since_admission"]] = times
    S[:, FEATURE_INDEX["minutes_since_last_vitals_alarm"]] = _alarm_minutes(vals[:, :12], times, cfg)
    return S


def build_state(imputed, episode, t_index, cfg=None):
    """The 32-feature state at grid index ``t_index``."""
    if not 0 <= t_index < len(imputed.grid):
        raise IndexError("t_index outside the grid")
    return episode_states(imputed, episode, cfg)[t_index]


def episode_actions(episode, n_steps):
    """Logged joint actions ``(vent_bit, sed_level)`` for grid indices ``0..n_steps-1``.

    ``vent_bit`` is the ventilation status the decision at t leads into (whether
    the patient is ventilated at t + 10), so an extubation appears as vent_bit 0
    taken from an on-vent state. ``sed_level`` is the highest level among drugs
    given during ``[t, t + 10)``; a bolus counts as its dose spread over the step.
    """
    times = np.arange(n_steps) * GRID_MINUTES
    nxt = times + GRID_MINUTES
    vent = np.zeros(n_steps, dtype=int)
    for iv in episode.vent_intervals:
        vent[(nxt >= iv.start_min) & (nxt < iv.end_min)] = 1
    sed = np.zeros(n_steps, dtype=int)
    for ev in episode.sedation_events:
        if ev.route == "bolus":
            hit = (ev.start_min >= times) & (ev.start_min < nxt)
            rate = ev.dose * (60.0 / GRID_MINUTES)
        else:
            hit = (ev.start_min < nxt) & (ev.end_min > times)
            rate = ev.dose
        if hit.any():
            lvl = map_sedation_level(ev.drug_id, rate, episode.weight)
            sed[hit] = np.maximum(sed[hit], lvl)
    return np.stack([vent, sed], axis=1)


def extract_action(episode, t_index):
    v, s = episode_actions(episode, t_index + 1)[t_index]
    return Action(int(v), int(s))


# ------------------------------------------------------------------- reward

def reward_components(s_t, s_next, cfg):
    """``(r_vitals, r_vent_off, r_vent_on)`` for batches of states (rows)."""
    s_t = np.atleast_2d(np.asarray(s_t, dtype=float))
    s_next = np.atleast_2d(np.asarray(s_next, dtype=float))
    n = len(s_t)
    r_vitals = np.zeros(n)
    for name, (lo, hi) in cfg.stability_ranges.items():
        j = FEATURE_INDEX[name]
        v, v1 = s_t[:, j], s_next[:, j]
        r_vitals += cfg.C1 * (expit(v - lo) - expit(v - hi) + 0.5)
        rel = np.abs(v1 - v) / np.maximum(np.abs(v), cfg.eps)
        r_vitals -= cfg.C2 * np.maximum(0.0, rel - cfg.fluctuation_threshold)
    on_t = s_t[:, VENT_COL] > 0.5
    on_next = s_next[:, VENT_COL] > 0.5
    n_viol = np.zeros(n)
    for name, (lo, hi) in cfg.extubation_ranges.items():
        v = s_t[:, FEATURE_INDEX[name]]
        n_viol += (v > hi) | (v < lo)
    r_off = np.where(~on_next, np.where(on_t, cfg.C3 - cfg.C5 * n_viol, cfg.C4), 0.0)
    r_on = np.where(on_next, np.where(on_t, -abs(cfg.C6), -cfg.C7), 0.0)
    return r_vitals, r_off, r_on


def reward_batch(s_t, s_next, cfg):
    a, b, c = reward_components(s_t, s_next, cfg)
    return a + b + c


def reward(s_t, a_t, s_next, cfg):
    """Shaped one-step reward; depends on the action only through ``s_next``."""
    return float(reward_batch(s_t, s_next, cfg)[0])


# -------------------------------------------------------------- transitions

@dataclass(frozen=True)
class Transition:
    admission_id: str
    step_index: int
    s_t: np.ndarray
    a_t: Action
    s_next: np.ndarray
    reward: float
    terminal_flag: bool


@dataclass
class TransitionSet:
    """Columnar store of one-step transitions (the batch every learner consumes)."""

    admission_ids: np.ndarray
    steps: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    reward_hash: str = ""

    def __len__(self):
        return len(self.rewards)

    def __getitem__(self, i):
        return Transition(str(self.admission_ids[i]), int(self.steps[i]), self.states[i],
                          Action(int(self.actions[i, 0]), int(self.actions[i, 1])),
                          self.next_states[i], float(self.rewards[i]), bool(self.terminal[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def action_index(self):
        return 4 * self.actions[:, 0] + self.actions[:, 1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return TransitionSet(self.admission_ids[idx], self.steps[idx], self.states[idx],
                             self.actions[idx], self.next_states[idx], self.rewards[idx],
                             self.terminal[idx], self.reward_hash)

    def by_admission(self):
        """Yield ``(admission_id, TransitionSet)`` in first-appearance order."""
        ids = self.admission_ids
        order = list(dict.fromkeys(ids.tolist()))
        for aid in order:
            yield aid, self.subset(np.flatnonzero(ids == aid))

    @classmethod
    def concatenate(cls, parts, reward_hash=""):
        parts = list(parts)
        if not parts:
            return cls(np.empty(0, dtype=object), np.empty(0, dtype=int), np.empty((0, STATE_DIM)),
                       np.empty((0, 2), dtype=int), np.empty((0, STATE_DIM)), np.empty(0),
                       np.empty(0, dtype=bool), reward_hash)
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("admission_ids", "steps", "states", "actions", "next_states", "rewards",
                      "terminal")), reward_hash=reward_hash)


def episode_transitions(episode, series, cfg):
    S = episode_states(series, episode, cfg)
    n = len(S)
    if n < 2:
        return TransitionSet.concatenate([], cfg.config_hash())
    A = episode_actions(episode, n)[:-1]
    r = reward_batch(S[:-1], S[1:], cfg)
    term = np.zeros(n - 1, dtype=bool)
    term[-1] = True
    ids = np.empty(n - 1, dtype=object)
    ids[:] = episode.admission_id
    return TransitionSet(ids, np.arange(n - 1), S[:-1], A, S[1:], r, term, cfg.config_hash())


def build_transitions(episodes, imputed, cfg=None):
    """One transition per consecutive grid pair of every admission, in input order.

    ``imputed`` is a sequence of regular series aligned with ``episodes`` or a
    mapping from admission id to series.
    """
    cfg = cfg or RewardConfig()
    if isinstance(imputed, dict):
        imputed = [imputed[ep.admission_id] for ep in episodes]
    parts = [episode_transitions(ep, ser, cfg) for ep, ser in zip(episodes, imputed)]
    return TransitionSet.concatenate(parts, cfg.config_hash())


# ----------------------------------------------------------------------- I/O

TRANSITION_COLUMNS = (("admission_id", "step") + tuple(f"s_{f}" for f in STATE_FEATURES)
                      + tuple(f"next_{f}" for f in STATE_FEATURES)
                      + ("vent_bit", "sed_level", "reward", "terminal"))


def write_transitions(ts, path, header_lines=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        fh.write(f"# reward_hash={ts.reward_hash}\n")
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSITION_COLUMNS)
        for i in range(len(ts)):
            w.writerow([ts.admission_ids[i], int(ts.steps[i]),
                        *map(repr, ts.states[i].tolist()), *map(repr, ts.next_states[i].tolist()),
                        int(ts.actions[i, 0]), int(ts.actions[i, 1]), repr(float(ts.rewards[i])),
                        int(ts.terminal[i])])


def read_header(path):
    """``key=value`` comment lines at the top of an artifact file."""
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
    return meta


def read_transitions(path, expected_reward_hash=None):
    meta = read_header(path)
    if int(meta.get("schema_version", SCHEMA_VERSION)) != SCHEMA_VERSION:
        raise ArtifactError(f"{path}: schema version {meta['schema_version']} != {SCHEMA_VERSION}")
    rhash = meta.get("reward_hash", "")
    if expected_reward_hash is not None and rhash != expected_reward_hash:
        raise ArtifactError(f"{path}: built with reward config {rhash}, "
                            f"current config is {expected_reward_hash}")
    ids, steps, rows = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.reader(lines)
        header = next(reader, None)
        if header is None:
            return TransitionSet.concatenate([], rhash)
        if tuple(header) != TRANSITION_COLUMNS:
            raise ParseError(path, 1, "header", "unexpected transition columns")
        for lineno, row in enumerate(reader, start=2):
            try:
                ids.append(row[0])
                steps.append(int(row[1]))
                rows.append([float(x) for x in row[2:]])
            except (ValueError, IndexError) as exc:
                raise ParseError(path, lineno, "*", str(exc)) from None
    M = np.array(rows, dtype=float).reshape(-1, 2 * STATE_DIM + 4)
    d = STATE_DIM
    admission_ids = np.empty(len(ids), dtype=object)
    admission_ids[:] = ids
    return TransitionSet(admission_ids, np.array(steps, dtype=int), M[:, :d], M[:, 2 * d:2 * d + 2].astype(int),
                         M[:, d:2 * d], M[:, 2 * d + 2], M[:, 2 * d + 3] > 0.5, rhash)
