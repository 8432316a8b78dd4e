"""Fitted Q-iteration, neural fitted Q-iteration and incremental Q-learning."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError, ValidationError, VentweanError
from .mdp import Action
from .regressors import (
    TreeEnsembleParams, adam_step, et_fit, et_predict, input_scaling, mlp_fit_epoch, mlp_init,
    mlp_loss_and_grad, mlp_predict,
)
from .schema import ACTIONS, N_ACTIONS, STATE_DIM

log = logging.getLogger(__name__)

ENCODING_VERSION = 1
ACTION_ARRAY = np.array(ACTIONS, dtype=float)   # (8, 2) in lexicographic order

TREES = "trees"
NETWORK = "network"


def encode(states, actions):
    """Regressor input: 32 state features followed by ``vent_bit, sed_level``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if states.shape[1] != STATE_DIM:
        raise ValidationError(f"expected {STATE_DIM} state features, got {states.shape[1]}")
    if len(actions) == 1 and len(states) > 1:
        actions = np.repeat(actions, len(states), axis=0)
    return np.hstack([states, actions])


def encode_all_actions(states):
    """Rows ``(s_0, a_0), ..., (s_0, a_7), (s_1, a_0), ...``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = len(states)
    return np.hstack([np.repeat(states, N_ACTIONS, axis=0), np.tile(ACTION_ARRAY, (n, 1))])


@dataclass
class QFunction:
    """A regressor over encoded ``(state, action)`` pairs."""

    kind: str
    model: object
    gamma: float
    encoding_version: int = ENCODING_VERSION

    def predict_encoded(self, Z):
        if self.kind == TREES:
            return et_predict(self.model, np.atleast_2d(Z))
        return mlp_predict(self.model, np.atleast_2d(Z))

    def predict(self, states, actions):
        return self.predict_encoded(encode(states, actions))

    def q_values(self, states):
        """``(n, 8)`` action values, columns in lexicographic action order."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape[1] != STATE_DIM:
            raise ValidationError(f"expected {STATE_DIM} state features, got {states.shape[1]}")
        return self.predict_encoded(encode_all_actions(states)).reshape(len(states), N_ACTIONS)


@dataclass
class ConstantQ:
    """Q-function returning a fixed value; handy as a hand-built ``q_prev``."""

    value: float
    gamma: float = 0.99

    def q_values(self, states):
        return np.full((len(np.atleast_2d(states)), N_ACTIONS), float(self.value))


def greedy_indices(q, states):
    """Argmax action index per state; ties go to the lowest index.

    Action indices follow ``(vent_bit, sed_level)`` lexicographic order, so the
    lowest index is the smallest pair.
    """
    return np.argmax(q.q_values(states), axis=1)


def greedy_action(q, state):
    """Greedy action for one state (an :class:`Action`) or many (``(n, 2)`` ints)."""
    state = np.asarray(state, dtype=float)
    idx = greedy_indices(q, state)
    if state.ndim == 1:
        return Action.from_index(int(idx[0]))
    return np.array(ACTIONS, dtype=int)[idx]


def bellman_targets(q_prev, batch, gamma=None):
    """``r + gamma * max_a q_prev(s', a)``, or ``r`` for terminal steps / no ``q_prev``."""
    if len(batch) == 0:
        raise ValidationError("empty transition batch")
    r = np.asarray(batch.rewards, dtype=float)
    if q_prev is None:
        return r.copy()
    g = q_prev.gamma if gamma is None else gamma
    if g == 0:
        return r.copy()
    live = ~np.asarray(batch.terminal, dtype=bool)
    out = r.copy()
    if live.any():
        nxt = q_prev.q_values(batch.next_states[live]).max(axis=1)
        out[live] = r[live] + g * nxt
    return out


# ----------------------------------------------------------------- config

@dataclass(frozen=True)
class NetworkParams:
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    l2: float = 1e-4
    epochs_per_iteration: int = 2
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs_per_iteration < 1 or self.batch_size < 1:
            raise ConfigError("epochs_per_iteration and batch_size must be >= 1")
        if self.lr < 0 or self.l2 < 0:
            raise ConfigError("lr and l2 must be non-negative")


@dataclass(frozen=True)
class FqiConfig:
    K: int = 100
    fraction: float = 0.10
    gamma: float = 0.99
    epsilon: float | None = None
    regressor: str = TREES
    tree_params: TreeEnsembleParams = field(default_factory=TreeEnsembleParams)
    network_params: NetworkParams = field(default_factory=NetworkParams)
    probe_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction must lie in (0, 1]")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0 < self.probe_fraction <= 1:
            raise ConfigError("probe_fraction must lie in (0, 1]")
        if self.regressor not in (TREES, NETWORK):
            raise ConfigError(f"unknown regressor {self.regressor!r}")
        if self.epsilon is not None and self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")


@dataclass
class ConvergenceTrace:
    """Mean ``|Q_k - Q_{k-1}|`` over a fixed probe set, one entry per iteration.

    ``Q_0`` is identically zero, so the first entry is the mean ``|Q_1|``.
    ``seconds`` holds each iteration's wall time.
    """

    label: str
    index_name: str = "iteration"
    deltas: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def __len__(self):
        return len(self.deltas)

    def mean_seconds(self):
        return float(np.mean(self.seconds)) if self.seconds else 0.0

    def first_below(self, ratio):
        """1-based iteration at which the trace first drops below ``ratio`` of entry 1."""
        if not self.deltas:
            return None
        for k, d in enumerate(self.deltas, start=1):
            if d < ratio * self.deltas[0]:
                return k
        return None


def write_trace(trace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([trace.index_name, "mean_abs_delta_q"])
        for k, d in enumerate(trace.deltas, start=1):
            w.writerow([k, repr(float(d))])


def read_trace(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([float(r[1]) for r in rows[1:]])


# ------------------------------------------------------------------- FQI

def _probe_indices(n, fraction, rng):
    m = max(1, int(math.ceil(fraction * n)))
    return np.sort(rng.choice(n, size=min(m, n), replace=False))


def _network_init(transitions, cfg):
    Z = encode(transitions.states, transitions.actions)
    mean, scale = input_scaling(Z)
    # Values grow to roughly reward / (1 - gamma); standardize toward that range.
    spread = max(float(np.std(transitions.rewards)), 1e-3)
    y_scale = spread / math.sqrt(max(1.0 - cfg.gamma, 1e-2))
    p = cfg.network_params
    return mlp_init(Z.shape[1], p.hidden, seed=p.seed, lr=p.lr, l2=p.l2, x_mean=mean,
                    x_scale=scale, y_scale=y_scale)


def fqi_train(transitions, cfg: FqiConfig = FqiConfig(), progress=None):
    """Fitted Q-iteration with a fresh random subset of transitions per iteration.

    Tree regressors are refit from scratch every iteration; the network is
    warm-started from the previous iteration's weights (NFQ). Returns the final
    :class:`QFunction` and its :class:`ConvergenceTrace`.
    """
    n = len(transitions)
    if n == 0:
        raise ValidationError("fqi_train needs at least one transition")
    rng = np.random.default_rng(cfg.seed)
    probe = _probe_indices(n, cfg.probe_fraction, rng)
    Zprobe = encode(transitions.states[probe], transitions.actions[probe])
    m = max(1, int(math.ceil(cfg.fraction * n)))
    label = "fqi_trees" if cfg.regressor == TREES else "fqi_network"
    trace = ConvergenceTrace(label)
    q = None
    prev_probe = np.zeros(len(probe))
    net = _network_init(transitions, cfg) if cfg.regressor == NETWORK else None
    for k in range(1, cfg.K + 1):
        t0 = time.perf_counter()
        idx = np.arange(n) if m == n else np.sort(rng.choice(n, size=m, replace=False))
        batch = transitions.subset(idx)
        try:
            y = bellman_targets(q, batch, cfg.gamma)
            Z = encode(batch.states, batch.actions)
            if cfg.regressor == TREES:
                tp = cfg.tree_params
                params = TreeEnsembleParams(tp.n_trees, tp.k_features, tp.min_leaf,
                                            tp.seed + k - 1, tp.task)
                q = QFunction(TREES, et_fit(Z, y, params), cfg.gamma)
            else:
                p = cfg.network_params
                epoch_rng = np.random.default_rng([cfg.seed, k])
                for _ in range(p.epochs_per_iteration):
                    mlp_fit_epoch(net, Z, y, p.batch_size, epoch_rng)
                q = QFunction(NETWORK, net.copy(), cfg.gamma)
        except VentweanError as exc:
            raise TrainingError(k, str(exc)) from exc
        cur = q.predict_encoded(Zprobe)
        if not np.all(np.isfinite(cur)):
            raise TrainingError(k, "non-finite Q predictions on the probe set")
        delta = float(np.mean(np.abs(cur - prev_probe)))
        prev_probe = cur
        trace.deltas.append(delta)
        trace.seconds.append(time.perf_counter() - t0)
        log.debug("%s iteration %d: mean |dQ| = %.6g (%.2fs)", label, k, delta, trace.seconds[-1])
        if progress is not None:
            progress(k, delta)
        if cfg.epsilon is not None and k > 1 and delta <= cfg.epsilon:
            break
    return q, trace


# ------------------------------------------------------------- Q-learning

@dataclass(frozen=True)
class QLearningConfig:
    alpha: float = 1e-3
    gamma: float = 0.99
    network_params: NetworkParams = field(default_factory=NetworkParams)
    probe_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")


def q_learning_train(transitions, cfg: QLearningConfig = QLearningConfig(), model=None):
    """Incremental Q-learning with a network, one update per transition.

    Transitions are consumed admission by admission in their stored order. Each
    update takes one Adam step with learning rate ``alpha`` on the squared TD
    error toward ``r + gamma * max_a Q(s', a)`` (``r`` when terminal). The trace
    holds the mean change of the probe-set predictions between successive
    admissions.
    """
    n = len(transitions)
    if n == 0:
        raise ValidationError("q_learning_train needs at least one transition")
    rng = np.random.default_rng(cfg.seed)
    probe = _probe_indices(n, cfg.probe_fraction, rng)
    Zprobe = encode(transitions.states[probe], transitions.actions[probe])
    if model is None:
        fcfg = FqiConfig(gamma=cfg.gamma, regressor=NETWORK, network_params=cfg.network_params)
        model = _network_init(transitions, fcfg)
    net = model.copy()
    net.lr = cfg.alpha
    q = QFunction(NETWORK, net, cfg.gamma)
    trace = ConvergenceTrace("q_learning", index_name="episode")
    prev = q.predict_encoded(Zprobe)
    step = 0
    for _, part in transitions.by_admission():
        t0 = time.perf_counter()
        Z = encode(part.states, part.actions)
        for i in range(len(part)):
            step += 1
            target = float(part.rewards[i])
            if not part.terminal[i] and cfg.gamma > 0:
                target += cfg.gamma * float(q.q_values(part.next_states[i:i + 1]).max())
            loss, grads = mlp_loss_and_grad(net, Z[i:i + 1], [target])
            if not math.isfinite(loss):
                raise TrainingError(step, f"non-finite TD loss (alpha={cfg.alpha})")
            if cfg.alpha > 0:
                adam_step(net, grads)
        cur = q.predict_encoded(Zprobe)
        trace.deltas.append(float(np.mean(np.abs(cur - prev))))
        trace.seconds.append(time.perf_counter() - t0)
        prev = cur
    return q, trace
