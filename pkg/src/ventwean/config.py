"""Run configuration: one TOML file with a table per pipeline stage.

Every key is optional; omitted keys take the library defaults. Unknown
tables or keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

import tomli

from .errors import ConfigError
from .fqi import FqiConfig, NetworkParams, QLearningConfig
from .gp_impute import GPOptConfig
from .mdp import RewardConfig
from .regressors import CLASSIFICATION, TreeEnsembleParams
from .simulate import SimConfig

CONFIG_ENV = "VENTWEAN_CONFIG"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "out"
    threads: int = 1
    test_fraction: float = 0.25


@dataclass(frozen=True)
class TreeSection:
    n_trees: int = 50
    min_leaf: int = 20
    k_features: int | None = None


@dataclass(frozen=True)
class FqiSection:
    K: int = 100
    fraction: float = 0.10
    epsilon: float | None = None
    probe_fraction: float = 0.01


@dataclass(frozen=True)
class NetworkSection:
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    l2: float = 1e-4
    epochs_per_iteration: int = 2
    batch_size: int = 64


@dataclass(frozen=True)
class QLearnSection:
    alpha: float = 1e-3


@dataclass(frozen=True)
class PolicySection:
    n_trees: int = 100
    min_leaf: int = 1
    k_features: int | None = None


@dataclass(frozen=True)
class EvaluateSection:
    replay_patients: int = 100
    replay_seeds: int = 20


@dataclass(frozen=True)
class SimSection:
    n_patients: int = 200
    overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    simulate: SimSection = field(default_factory=SimSection)
    impute: dict = field(default_factory=dict)
    reward: dict = field(default_factory=dict)
    fqi: FqiSection = field(default_factory=FqiSection)
    trees: TreeSection = field(default_factory=TreeSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    qlearn: QLearnSection = field(default_factory=QLearnSection)
    policy: PolicySection = field(default_factory=PolicySection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    # -- derived library configs ------------------------------------------
    @property
    def seed(self):
        return self.run.seed

    def with_seed(self, seed):
        return replace(self, run=replace(self.run, seed=int(seed)))

    def sim_config(self, n_patients=None, seed_offset=0):
        return SimConfig(n_patients=n_patients or self.simulate.n_patients,
                         seed=self.seed + seed_offset, **self.simulate.overrides)

    def gp_config(self):
        return GPOptConfig(**{"seed": self.seed, **self.impute})

    def reward_config(self):
        return RewardConfig(**self.reward)

    def tree_params(self):
        t = self.trees
        return TreeEnsembleParams(t.n_trees, t.k_features, t.min_leaf, self.seed)

    def network_params(self):
        n = self.network
        return NetworkParams(tuple(n.hidden), n.lr, n.l2, n.epochs_per_iteration, n.batch_size, self.seed)

    def fqi_config(self, regressor):
        f = self.fqi
        return FqiConfig(K=f.K, fraction=f.fraction, gamma=self.reward_config().gamma,
                         epsilon=f.epsilon, regressor=regressor, tree_params=self.tree_params(),
                         network_params=self.network_params(), probe_fraction=f.probe_fraction,
                         seed=self.seed)

    def qlearning_config(self):
        return QLearningConfig(alpha=self.qlearn.alpha, gamma=self.reward_config().gamma,
                               network_params=self.network_params(),
                               probe_fraction=self.fqi.probe_fraction, seed=self.seed)

    def policy_params(self):
        p = self.policy
        return TreeEnsembleParams(p.n_trees, p.k_features, p.min_leaf, self.seed, CLASSIFICATION)

    def config_hash(self):
        blob = json.dumps(to_dict(self, portable=True), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {
    "run": RunSection, "fqi": FqiSection, "trees": TreeSection, "network": NetworkSection,
    "qlearn": QLearnSection, "policy": PolicySection, "evaluate": EvaluateSection,
}
_FREE_SECTIONS = {"impute": GPOptConfig, "reward": RewardConfig}


def _known(cls):
    return {f.name for f in fields(cls)}


def _check_keys(section, table, allowed):
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")


def from_dict(data):
    """Build a :class:`RunConfig` from a parsed TOML tree, validating every value."""
    unknown = set(data) - set(_SECTIONS) - set(_FREE_SECTIONS) - {"simulate"}
    if unknown:
        raise ConfigError(f"unknown config tables {sorted(unknown)}")
    kw = {}
    for name, cls in _SECTIONS.items():
        table = dict(data.get(name, {}))
        _check_keys(name, table, _known(cls))
        if "hidden" in table:
            table["hidden"] = tuple(table["hidden"])
        kw[name] = cls(**table)
    for name, cls in _FREE_SECTIONS.items():
        table = dict(data.get(name, {}))
        _check_keys(name, table, _known(cls) - {"stability_ranges", "extubation_ranges", "seed"})
        for key in ("init_v", "init_mu"):
            if key in table:
                table[key] = tuple(table[key])
        kw[name] = table
    sim = dict(data.get("simulate", {}))
    n = sim.pop("n_patients", SimSection.n_patients)
    _check_keys("simulate", sim, _known(SimConfig) - {"n_patients", "seed", "dynamics"})
    for key in ("premature_gap_h", "failure_lag_h", "post_extubation_stay_h"):
        if key in sim:
            sim[key] = tuple(sim[key])
    kw["simulate"] = SimSection(n, sim)
    cfg = RunConfig(**kw)
    # Construct every library config once so bad values fail at load time.
    try:
        cfg.sim_config()
        cfg.gp_config()
        cfg.reward_config()
        cfg.fqi_config("trees")
        cfg.qlearning_config()
        cfg.policy_params()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if cfg.run.threads < 1:
        raise ConfigError("[run] threads must be >= 1")
    return cfg


# Where a run writes and how many threads it uses do not change its results.
_LOCAL_KEYS = ("out_dir", "threads")


def to_dict(cfg, portable=False):
    """Plain-dict form; ``portable`` drops the machine-local ``[run]`` keys."""
    d = asdict(cfg)
    if portable:
        for key in _LOCAL_KEYS:
            d["run"].pop(key)
    sim = d.pop("simulate")
    d["simulate"] = {"n_patients": sim["n_patients"], **sim["overrides"]}
    return d


def load_config(path=None):
    """Read a TOML config; ``None`` falls back to ``$VENTWEAN_CONFIG`` or defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)
