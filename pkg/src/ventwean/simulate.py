"""Synthetic ventilated-patient cohorts.

Each patient recovers along ``rho(t) = 1 - exp(-t / tau)`` and is ready for
extubation once ``rho`` passes ``readiness_threshold`` (time ``t_e``). Vitals
are mean-reverting (Ornstein-Uhlenbeck) around means that move from a "sick"
to a "healthy" value with ``rho``; arterial pH, FiO2 and PEEP carry most of
the readiness signal. FiO2 and PEEP are set by the clinician and are weaned
along a logistic in ``rho`` centred on the readiness threshold, so they reach
their extubation ranges around ``t_e``. Sedation lowers RASS, heart and respiratory rate and,
off the ventilator, depresses breathing. Extubating before ``t_e`` fails with
probability ``1 - exp(-k * gap_hours)``; a failure brings a distress ramp and
then reintubation.

The same step engine runs the built-in clinician (behavior) policy to produce
logged admissions and replays any external state->action policy on the same
patients with the same noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .cohort import PatientEpisode, SedationEvent, VentilationInterval, VitalsSample
from .errors import ConfigError
from .mdp import RewardConfig, rate_for_level, reward_batch
from .schema import (
    DRUG_NAMES, DRUG_OFFSET, FEATURE_INDEX, GRID_MINUTES, N_SIGNALS, SIGNAL_INDEX,
    SIGNAL_NAMES, STATE_DIM,
)

log = logging.getLogger(__name__)

SEDATIVES = ("propofol", "midazolam", "dexmedetomidine")
ANALGESICS = ("fentanyl", "morphine", "hydromorphone")


@dataclass(frozen=True)
class SignalDynamics:
    sick: float
    healthy: float
    patient_sd: float           # between-patient offset of the mean
    reversion_per_h: float      # OU mean-reversion rate
    noise_sd: float             # stationary OU spread
    meas_sd: float              # charting noise
    interval_min: float         # mean exponential inter-arrival time
    lo: float
    hi: float
    off_vent: float | None = None   # ventilator settings: mean while extubated
    weaned: bool = False            # mean follows a logistic centred on readiness


def default_dynamics():
    D = SignalDynamics
    return {
        "heart_rate": D(96.0, 86.0, 10.0, 3.0, 5.0, 2.0, 30.0, 30.0, 220.0),
        "respiratory_rate": D(21.0, 18.0, 2.5, 3.0, 2.5, 1.0, 30.0, 2.0, 60.0),
        "spo2": D(92.0, 97.0, 1.0, 2.0, 1.2, 0.8, 30.0, 60.0, 100.0),
        "arterial_ph": D(7.22, 7.42, 0.015, 0.6, 0.015, 0.01, 240.0, 6.8, 7.8),
        "pao2": D(75.0, 92.0, 10.0, 1.0, 8.0, 4.0, 240.0, 35.0, 250.0),
        "paco2": D(46.0, 41.0, 4.0, 1.0, 2.5, 1.5, 240.0, 20.0, 100.0),
        "fio2": D(70.0, 30.0, 1.0, 1.5, 1.0, 1.0, 90.0, 21.0, 100.0, off_vent=28.0, weaned=True),
        "o2_flow": D(0.0, 0.0, 0.5, 3.0, 0.3, 0.2, 120.0, 0.0, 15.0, off_vent=3.0),
        "peep_set": D(12.0, 4.0, 0.3, 1.5, 0.3, 0.2, 90.0, 0.0, 25.0, off_vent=0.0, weaned=True),
        "tidal_volume": D(460.0, 480.0, 40.0, 2.0, 25.0, 10.0, 90.0, 150.0, 900.0, off_vent=380.0),
        "mean_bp": D(72.0, 82.0, 8.0, 2.0, 5.0, 3.0, 60.0, 35.0, 150.0),
        "temperature": D(37.8, 37.1, 0.3, 0.5, 0.15, 0.1, 240.0, 34.0, 41.0),
    }


# Additive effects on latent means (per sedation level, and at full distress).
SEDATION_EFFECT = {"heart_rate": -3.0, "respiratory_rate": -2.0, "mean_bp": -3.0}
UNDERSEDATION_EFFECT = {"heart_rate": 12.0, "respiratory_rate": 7.0}
OFF_VENT_SEDATION_EFFECT = {"respiratory_rate": -3.0, "arterial_ph": -0.03, "paco2": 4.0, "spo2": -1.5}
DISTRESS_EFFECT = {"heart_rate": 45.0, "respiratory_rate": 20.0, "spo2": -9.0, "arterial_ph": -0.12,
                   "pao2": -25.0, "paco2": 14.0, "o2_flow": 5.0, "fio2": 25.0, "mean_bp": 8.0}
VENT_SETTINGS = ("fio2", "o2_flow", "peep_set", "tidal_volume")

MAX_EXTUBATIONS = 16


@dataclass(frozen=True)
class SimConfig:
    n_patients: int = 100
    seed: int = 0
    recovery_tau_median_h: float = 29.0
    recovery_tau_sigma: float = 0.45
    readiness_threshold: float = 0.75
    min_readiness_h: float = 12.0
    weaning_width: float = 0.04
    dynamics: dict = field(default_factory=default_dynamics)
    rass_interval_min: float = 120.0
    mode_interval_min: float = 120.0
    off_vent_interval_factor: float = 3.0
    # Behavior (clinician) policy.
    extubation_delay_mean_h: float = 6.0
    premature_prob: float = 0.25
    premature_gap_h: tuple = (2.0, 16.0)
    min_ventilation_h: float = 2.0
    sedation_review_h: float = 2.0
    sedation_hold_h: float = 3.0
    sedation_noise: float = 0.6
    bolus_prob: float = 0.01
    # Outcomes.
    reintubation_steepness: float = 0.15
    sedated_extubation_risk: float = 0.0     # extra failure risk per sedation level above 1
    failure_lag_h: tuple = (1.0, 8.0)
    reintubation_setback_h: float = 12.0
    post_extubation_stay_h: tuple = (12.0, 36.0)
    max_stay_days: float = 12.0
    mortality_prob: float = 0.05

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        positive = ("recovery_tau_median_h", "recovery_tau_sigma", "rass_interval_min",
                    "mode_interval_min", "off_vent_interval_factor", "sedation_review_h",
                    "max_stay_days", "min_ventilation_h")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        nonneg = ("extubation_delay_mean_h", "reintubation_steepness", "sedated_extubation_risk",
                  "sedation_hold_h", "min_readiness_h", "reintubation_setback_h")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("premature_prob", "sedation_noise", "bolus_prob", "mortality_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not self.weaning_width > 0:
            raise ConfigError("weaning_width must be positive")
        if not 0 < self.readiness_threshold < 1:
            raise ConfigError("readiness_threshold must lie in (0, 1)")
        for name in ("premature_gap_h", "failure_lag_h", "post_extubation_stay_h"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < low <= high")
        missing = set(SIGNAL_NAMES) - set(self.dynamics)
        if missing:
            raise ConfigError(f"dynamics missing for {sorted(missing)}")
        for name, d in self.dynamics.items():
            if min(d.reversion_per_h, d.noise_sd, d.interval_min) <= 0 or d.patient_sd < 0 or d.meas_sd < 0:
                raise ConfigError(f"dynamics for {name}: rates and spreads must be positive")

    @property
    def max_steps(self):
        return int(self.max_stay_days * 24 * 60 / GRID_MINUTES)

    def risk(self, gap_h):
        """Reintubation probability after extubating ``gap_h`` hours before readiness."""
        return 1.0 - math.exp(-self.reintubation_steepness * max(gap_h, 0.0))


@dataclass(frozen=True)
class PatientParams:
    admission_id: str
    index: int
    age: float
    weight: float
    gender_flag: int
    emergency_flag: int
    white_flag: int
    tau_min: float
    readiness_min: float
    care_variability: float
    premature_prob: float
    agitation: float
    offsets: np.ndarray
    sedative: str
    analgesic: str
    post_stay_min: float
    discharged_alive: bool


def sample_patients(config: SimConfig):
    """Draw latent patient parameters (deterministic per ``config.seed``)."""
    children = np.random.SeedSequence(config.seed).spawn(config.n_patients)
    dyn = config.dynamics
    out = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        age = float(np.clip(rng.normal(62.0, 15.0), 18.0, 95.0))
        weight = float(np.clip(rng.normal(80.0, 18.0), 40.0, 180.0))
        tau_h = config.recovery_tau_median_h * math.exp(
            config.recovery_tau_sigma * rng.standard_normal() + 0.008 * (age - 60.0))
        t_e = max(-tau_h * 60.0 * math.log(1.0 - config.readiness_threshold),
                  config.min_readiness_h * 60.0)
        tau_min = -t_e / math.log(1.0 - config.readiness_threshold)
        q = float(rng.beta(2.0, 2.0))
        p_i = 1.0 - (1.0 - config.premature_prob) ** (2.0 * q)
        out.append(PatientParams(
            admission_id=f"SIM{config.seed:04d}-{i:05d}",
            index=i,
            age=round(age, 1),
            weight=round(weight, 1),
            gender_flag=int(rng.random() < 0.55),
            emergency_flag=int(rng.random() < 0.7),
            white_flag=int(rng.random() < 0.65),
            tau_min=tau_min,
            readiness_min=t_e,
            care_variability=q,
            premature_prob=p_i,
            agitation=float(rng.uniform(0.5, 1.5)),
            offsets=np.array([rng.normal(0.0, dyn[n].patient_sd) for n in SIGNAL_NAMES]),
            sedative=SEDATIVES[int(rng.integers(len(SEDATIVES)))],
            analgesic=ANALGESICS[int(rng.integers(len(ANALGESICS)))],
            post_stay_min=float(rng.uniform(*config.post_extubation_stay_h)) * 60.0,
            discharged_alive=bool(rng.random() >= config.mortality_prob),
        ))
    return out


@dataclass
class Trajectory:
    """One simulated admission on the 10-minute grid (index k <-> minute 10k)."""

    patient: PatientParams
    latent: np.ndarray          # (L, 14): 12 signals, RASS (continuous), vent mode
    states: np.ndarray          # (L, 32) state vectors built from latent values
    vent: np.ndarray            # (L,) ventilation status at grid time
    actions: np.ndarray         # (L, 2) decisions taken at each grid time
    infusion_rates: np.ndarray  # (L, 6) hourly rates given during [t, t + 10)
    boluses: list               # (step, drug, dose, offset_min)
    discharge_min: float
    reintubations: int
    censored: bool

    def rewards(self, cfg=None):
        cfg = cfg or RewardConfig()
        return reward_batch(self.states[:-1], self.states[1:], cfg)

    def mean_reward(self, cfg=None):
        r = self.rewards(cfg)
        return float(r.mean()) if len(r) else 0.0


def _draw_noise(config, patients, replicate):
    n, K = len(patients), config.max_steps + 2
    eps = np.empty((n, K, N_SIGNALS + 1))
    unif = np.empty((n, K, 3))
    ext = np.empty((n, MAX_EXTUBATIONS, 5))
    for j, p in enumerate(patients):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, replicate, p.index, 1]))
        eps[j] = rng.standard_normal((K, N_SIGNALS + 1))
        unif[j] = rng.random((K, 3))
        ext[j] = rng.random((MAX_EXTUBATIONS, 5))
    return eps, unif, ext


class _Engine:
    def __init__(self, config, patients, policy, replicate, reward_cfg):
        self.cfg = config
        self.P = patients
        self.policy = policy
        self.rcfg = reward_cfg
        n = len(patients)
        self.n = n
        dyn = config.dynamics
        self.sick = np.array([dyn[s].sick for s in SIGNAL_NAMES])
        self.healthy = np.array([dyn[s].healthy for s in SIGNAL_NAMES])
        self.off = np.array([np.nan if dyn[s].off_vent is None else dyn[s].off_vent for s in SIGNAL_NAMES])
        self.is_setting = ~np.isnan(self.off)
        self.weaned = np.array([dyn[s].weaned for s in SIGNAL_NAMES])
        self.lo = np.array([dyn[s].lo for s in SIGNAL_NAMES])
        self.hi = np.array([dyn[s].hi for s in SIGNAL_NAMES])
        dt_h = GRID_MINUTES / 60.0
        theta = np.array([dyn[s].reversion_per_h for s in SIGNAL_NAMES])
        self.decay = np.exp(-theta * dt_h)
        self.step_sd = np.array([dyn[s].noise_sd for s in SIGNAL_NAMES]) * np.sqrt(1 - self.decay ** 2)
        self.rass_decay = math.exp(-4.0 * dt_h)
        self.rass_sd = 0.5 * math.sqrt(1 - self.rass_decay ** 2)

        def vec(attr, dtype=float):
            return np.array([getattr(p, attr) for p in patients], dtype=dtype)

        self.offsets = np.stack([p.offsets for p in patients])
        self.tau = vec("tau_min")
        self.t_e = vec("readiness_min")
        self.agit = vec("agitation")
        self.q = vec("care_variability")
        self.p_prem = vec("premature_prob")
        self.weight = vec("weight")
        self.post_stay = vec("post_stay_min")
        self.sed_drug = np.array([DRUG_NAMES.index(p.sedative) for p in patients])
        self.ana_drug = np.array([DRUG_NAMES.index(p.analgesic) for p in patients])
        self.eps, self.unif, self.ext = _draw_noise(config, patients, replicate)

        # Per-patient process state.
        self.vent = np.ones(n, dtype=bool)
        self.shift = np.zeros(n)
        self.vent_start = np.zeros(n)
        self.last_extubation = np.full(n, np.nan)
        self.n_intub = np.ones(n)
        self.n_ext = np.zeros(n, dtype=int)
        self.reintubations = np.zeros(n, dtype=int)
        self.planned_ext = np.zeros(n)
        self.fail_at = np.full(n, np.inf)
        self.fail_lag = np.ones(n)
        self.discharge_at = np.full(n, np.inf)
        self.sed = np.zeros(n, dtype=int)
        self.prev_rates = np.zeros((n, len(DRUG_NAMES)))
        self.last_alarm = np.full(n, np.nan)
        self.active = np.ones(n, dtype=bool)
        self.censored = np.zeros(n, dtype=bool)
        self.x = np.zeros((n, N_SIGNALS))
        self.rass = np.zeros(n)
        self.records = [dict(latent=[], states=[], vent=[], actions=[], rates=[], boluses=[])
                        for _ in range(n)]
        self._plan_extubation(np.arange(n), np.zeros(n))
        m = self._means(0.0 * self.tau)
        self.x = m + np.array([config.dynamics[s].noise_sd for s in SIGNAL_NAMES]) * self.eps[:, 0, :N_SIGNALS]
        self.rass = self._rass_mean() + 0.5 * self.eps[:, 0, N_SIGNALS]

    # -- latent means -------------------------------------------------------
    def _rho(self, t):
        return 1.0 - np.exp(-np.maximum(t - self.shift, 0.0) / self.tau)

    def _distress(self, t):
        d = np.zeros(self.n)
        pending = np.isfinite(self.fail_at) & ~self.vent
        d[pending] = np.clip((t[pending] - (self.fail_at[pending] - self.fail_lag[pending]))
                             / self.fail_lag[pending], 0.0, 1.0)
        return d

    def _means(self, t):
        rho = self._rho(t)[:, None]
        # Clinicians wean FiO2 and PEEP as the patient nears readiness.
        wean = 1.0 / (1.0 + np.exp(-(rho - self.cfg.readiness_threshold) / self.cfg.weaning_width))
        m = self.sick + (self.healthy - self.sick) * np.where(self.weaned, wean, rho) + self.offsets
        off = ~self.vent
        if off.any():
            off_mean = self.off + 0.5 * self.offsets[off]
            m[off] = np.where(self.is_setting, off_mean, m[off])
        lvl = self.sed.astype(float)
        for name, eff in SEDATION_EFFECT.items():
            m[:, SIGNAL_INDEX[name]] += eff * lvl
        under = self.vent & (self.sed == 0)
        for name, eff in UNDERSEDATION_EFFECT.items():
            m[under, SIGNAL_INDEX[name]] += eff * self.agit[under]
        for name, eff in OFF_VENT_SEDATION_EFFECT.items():
            m[off, SIGNAL_INDEX[name]] += eff * lvl[off]
        d = self._distress(t)
        for name, eff in DISTRESS_EFFECT.items():
            m[:, SIGNAL_INDEX[name]] += eff * d
        return m

    def _rass_mean(self):
        lvl = self.sed.astype(float)
        return np.where(self.vent, 1.5 * self.agit - 1.4 * lvl, 0.3 - 1.2 * lvl)

    # -- behavior policy ----------------------------------------------------
    def _plan_extubation(self, idx, now):
        cfg = self.cfg
        for j, t in zip(idx, now):
            e = self.ext[j, min(self.n_ext[j], MAX_EXTUBATIONS - 1)]
            gap = (cfg.premature_gap_h[0] + e[1] * (cfg.premature_gap_h[1] - cfg.premature_gap_h[0])) * 60.0
            earliest = t + cfg.min_ventilation_h * 60.0
            if e[0] < self.p_prem[j] and self.t_e[j] - gap >= earliest:
                self.planned_ext[j] = self.t_e[j] - gap
            else:
                delay = -cfg.extubation_delay_mean_h * 60.0 * math.log(1.0 - e[2])
                self.planned_ext[j] = max(self.t_e[j], earliest) + delay

    def _behavior_sedation(self, k, t):
        cfg = self.cfg
        review_steps = max(int(round(cfg.sedation_review_h * 60.0 / GRID_MINUTES)), 1)
        u = self.unif[:, k]
        rho = self._rho(t)
        target = np.where(rho < 0.5, 2, 1) + (self.agit > 1.2)
        hold = self.planned_ext - t <= cfg.sedation_hold_h * 60.0
        target = np.where(self.vent, np.where(hold, 0, target), 0)
        noisy = u[:, 1] < cfg.sedation_noise * self.q
        target = np.where(noisy, np.minimum((u[:, 2] * 4).astype(int), 3), target)
        review = (k % review_steps == 0)
        new = np.where(review, target, self.sed)
        # Lighten promptly for planned extubation and after it.
        clear = (self.vent & hold) | ~self.vent
        new = np.where(clear & ~noisy, np.minimum(new, target), new)
        return new.astype(int)

    # -- states -------------------------------------------------------------
    def _states(self, t):
        n = self.n
        S = np.zeros((n, STATE_DIM))
        for j, name in enumerate(("age", "weight", "gender_flag", "emergency_flag", "white_flag")):
            S[:, j] = [getattr(p, name) for p in self.P]
        S[:, 5:17] = self.x
        S[:, FEATURE_INDEX["rass"]] = np.clip(np.round(self.rass), -5, 4)
        rho = self._rho(t)
        S[:, FEATURE_INDEX["vent_mode_code"]] = np.where(self.vent, np.where(rho < 0.5, 1.0, 2.0), 0.0)
        S[:, DRUG_OFFSET:DRUG_OFFSET + len(DRUG_NAMES)] = self.prev_rates / self.weight[:, None]
        S[:, FEATURE_INDEX["sed_level_current"]] = self.prev_level
        S[:, FEATURE_INDEX["vent_on_flag"]] = self.vent
        S[:, FEATURE_INDEX["minutes_into_current_ventilation"]] = np.where(self.vent, t - self.vent_start, 0.0)
        since = np.where(self.vent | np.isnan(self.last_extubation), 0.0, t - self.last_extubation)
        S[:, FEATURE_INDEX["minutes_since_last_extubation"]] = since
        S[:, FEATURE_INDEX["num_intubations_so_far"]] = self.n_intub
        S[:, FEATURE_INDEX["minutes_since_admission"]] = t
        alarm = np.zeros(n, dtype=bool)
        for name, (lo, hi) in self.rcfg.stability_ranges.items():
            v = self.x[:, SIGNAL_INDEX[name]]
            alarm |= (v < lo) | (v > hi)
        self.last_alarm = np.where(alarm, t, self.last_alarm)
        S[:, FEATURE_INDEX["minutes_since_last_vitals_alarm"]] = np.where(
            np.isnan(self.last_alarm), t, t - self.last_alarm)
        return S

    # -- main loop ----------------------------------------------------------
    def run(self):
        cfg = self.cfg
        self.prev_level = np.zeros(self.n)
        for k in range(cfg.max_steps + 1):
            if not self.active.any():
                break
            t = np.full(self.n, k * GRID_MINUTES)
            S = self._states(t)
            # Decide.
            behavior_sed = self._behavior_sedation(k, t)
            extubate_behavior = self.vent & (t + GRID_MINUTES >= self.planned_ext)
            if self.policy is None:
                sed = behavior_sed
                extubate = extubate_behavior
            else:
                act = np.asarray(self.policy(S), dtype=int).reshape(self.n, 2)
                sed = act[:, 1].astype(int)
                extubate = self.vent & (act[:, 0] == 0) & (t + GRID_MINUTES - self.vent_start
                                                           >= cfg.min_ventilation_h * 60.0)
            t_next = t + GRID_MINUTES
            reintubate = ~self.vent & (t_next >= self.fail_at)
            vent_next = np.where(self.vent, ~extubate, reintubate)
            last_step = self.active & ((~vent_next & (t_next >= self.discharge_at))
                                       | (k >= cfg.max_steps))
            # Record grid point k.
            rates = np.zeros((self.n, len(DRUG_NAMES)))
            rows = np.arange(self.n)
            for j in range(self.n):
                if sed[j] > 0:
                    rates[j, self.sed_drug[j]] = rate_for_level(DRUG_NAMES[self.sed_drug[j]], sed[j], self.weight[j])
                    rates[j, self.ana_drug[j]] = rate_for_level(DRUG_NAMES[self.ana_drug[j]], 1, self.weight[j])
            bolus = (self.policy is None) & self.vent & (self.unif[:, k, 0] < cfg.bolus_prob) & ~last_step
            step_rates = rates.copy()
            for j in np.flatnonzero(self.active):
                rec = self.records[j]
                rec["latent"].append(np.concatenate([self.x[j], [self.rass[j], S[j, FEATURE_INDEX["vent_mode_code"]]]]))
                rec["states"].append(S[j])
                rec["vent"].append(bool(self.vent[j]))
                rec["actions"].append((int(vent_next[j]), int(sed[j])))
                rec["rates"].append(rates[j])
                if bolus[j]:
                    drug = DRUG_NAMES[self.ana_drug[j]]
                    dose = rate_for_level(drug, 1, self.weight[j]) * GRID_MINUTES / 60.0
                    offset = float(np.floor(self.unif[j, k, 2] * 9.0)) + 0.5
                    rec["boluses"].append((k, drug, dose, offset))
                    step_rates[j, self.ana_drug[j]] += dose * 60.0 / GRID_MINUTES
            for j in np.flatnonzero(last_step):
                self.active[j] = False
                self.censored[j] = bool(self.vent[j] and vent_next[j]) or k >= cfg.max_steps
                self.records[j]["discharge_min"] = float(t_next[j])
            # Transition to k + 1.
            ext_idx = np.flatnonzero(self.active & self.vent & ~vent_next)
            for j in ext_idx:
                e = self.ext[j, min(self.n_ext[j], MAX_EXTUBATIONS - 1)]
                gap_h = (self.t_e[j] - t_next[j]) / 60.0
                p_fail = cfg.risk(gap_h) if gap_h > 0 else 0.0
                p_fail = 1.0 - (1.0 - p_fail) * (1.0 - min(cfg.sedated_extubation_risk * max(sed[j] - 1, 0), 1.0))
                lag = (cfg.failure_lag_h[0] + e[4] * (cfg.failure_lag_h[1] - cfg.failure_lag_h[0])) * 60.0
                if e[3] < p_fail:
                    self.fail_at[j] = t_next[j] + lag
                    self.fail_lag[j] = lag
                    self.discharge_at[j] = np.inf
                else:
                    self.fail_at[j] = np.inf
                    self.discharge_at[j] = t_next[j] + self.post_stay[j]
                self.n_ext[j] += 1
                self.last_extubation[j] = t_next[j]
            re_idx = np.flatnonzero(self.active & reintubate)
            for j in re_idx:
                self.reintubations[j] += 1
                self.n_intub[j] += 1
                self.vent_start[j] = t_next[j]
                self.fail_at[j] = np.inf
                # A failed extubation costs recovery time.
                self.shift[j] += cfg.reintubation_setback_h * 60.0
                self.t_e[j] += cfg.reintubation_setback_h * 60.0
            if len(re_idx):
                self._plan_extubation(re_idx, t_next[re_idx])
            changed = self.vent != vent_next
            self.vent = vent_next
            self.sed = sed
            self.prev_rates = step_rates
            self.prev_level = sed.astype(float)
            m = self._means(t_next)
            new_x = m + self.decay * (self.x - m) + self.step_sd * self.eps[:, k + 1, :N_SIGNALS]
            # Ventilator settings switch regime immediately at (de)intubation.
            jump = changed[:, None] & self.is_setting[None, :]
            new_x = np.where(jump, m + self.step_sd * self.eps[:, k + 1, :N_SIGNALS], new_x)
            self.x = np.clip(new_x, self.lo, self.hi)
            rm = self._rass_mean()
            self.rass = rm + self.rass_decay * (self.rass - rm) + self.rass_sd * self.eps[:, k + 1, N_SIGNALS]
        return [self._trajectory(j) for j in range(self.n)]

    def _trajectory(self, j):
        rec = self.records[j]
        return Trajectory(
            patient=self.P[j],
            latent=np.array(rec["latent"]),
            states=np.array(rec["states"]),
            vent=np.array(rec["vent"]),
            actions=np.array(rec["actions"], dtype=int),
            infusion_rates=np.array(rec["rates"]),
            boluses=rec["boluses"],
            discharge_min=rec["discharge_min"],
            reintubations=int(self.reintubations[j]),
            censored=bool(self.censored[j]),
        )


def run_simulation(config, patients=None, policy=None, replicate=0, reward_cfg=None):
    """Simulate ``patients`` under ``policy`` (``None`` = built-in clinician).

    ``policy`` maps an ``(n, 32)`` state array to ``(n, 2)`` integer actions
    ``(vent_bit, sed_level)``. It controls extubation timing (vent_bit 0 while
    ventilated) and sedation; reintubation is driven by the patient's outcome,
    not by the policy. ``replicate`` selects the dynamics-noise stream, so two
    policies run with the same replicate see the same random numbers.
    """
    patients = sample_patients(config) if patients is None else list(patients)
    if not patients:
        return []
    return _Engine(config, patients, policy, replicate, reward_cfg or RewardConfig()).run()


# --------------------------------------------------------- logged episodes

def _vent_intervals(traj):
    out = []
    v = traj.vent
    k, L = 0, len(v)
    while k < L:
        if v[k]:
            s = k
            while k < L and v[k]:
                k += 1
            end = k * GRID_MINUTES
            reason = "extubated"
            if k == L and traj.censored:
                reason = "censored_at_discharge"
                end = traj.discharge_min
            out.append(VentilationInterval(float(s * GRID_MINUTES), float(end), reason))
        else:
            k += 1
    return tuple(out)


def _sedation_events(traj):
    events = []
    rates = traj.infusion_rates
    L = len(rates)
    for d, drug in enumerate(DRUG_NAMES):
        col = rates[:, d]
        k = 0
        while k < L:
            if col[k] > 0:
                s, r = k, col[k]
                while k < L and col[k] == r:
                    k += 1
                events.append(SedationEvent(drug, float(r), "continuous_rate",
                                            float(s * GRID_MINUTES), float(k * GRID_MINUTES)))
            else:
                k += 1
    for step, drug, dose, offset in traj.boluses:
        events.append(SedationEvent(drug, float(dose), "bolus", float(step * GRID_MINUTES + offset)))
    events.sort(key=lambda e: (e.start_min, e.drug_id, e.route))
    return tuple(events)


def _poisson_times(rng, mean_interval, start, end):
    n_max = int((end - start) / mean_interval * 2 + 20)
    gaps = rng.exponential(mean_interval, n_max)
    t = start + np.cumsum(gaps)
    while t[-1] < end:
        t = np.concatenate([t, t[-1] + np.cumsum(rng.exponential(mean_interval, n_max))])
    return t[t < end]


def _measurements(traj, config, replicate):
    p = traj.patient
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, replicate, p.index, 2]))
    L = len(traj.latent)
    end = float(L * GRID_MINUTES)
    samples = []
    for d, name in enumerate(SIGNAL_NAMES):
        dyn = config.dynamics[name]
        t = _poisson_times(rng, dyn.interval_min, 0.0, end)
        if name in VENT_SETTINGS:
            # Settings are charted less often once extubated.
            keep = rng.random(len(t))
            on = traj.vent[np.minimum((t // GRID_MINUTES).astype(int), L - 1)]
            t = t[on | (keep < 1.0 / config.off_vent_interval_factor)]
        k = np.minimum((t // GRID_MINUTES).astype(int), L - 1)
        vals = np.clip(traj.latent[k, d] + dyn.meas_sd * rng.standard_normal(len(t)), dyn.lo, dyn.hi)
        samples.extend(VitalsSample(name, round(float(a), 2), round(float(b), 4)) for a, b in zip(t, vals))
    t = _poisson_times(rng, config.rass_interval_min, 0.0, end)
    k = np.minimum((t // GRID_MINUTES).astype(int), L - 1)
    rass = np.clip(np.round(traj.latent[k, N_SIGNALS] + 0.4 * rng.standard_normal(len(t))), -5, 4)
    samples.extend(VitalsSample("rass", round(float(a), 2), float(b)) for a, b in zip(t, rass))
    t = _poisson_times(rng, config.mode_interval_min, 0.0, end)
    changes = np.flatnonzero(np.diff(traj.vent.astype(int)) != 0) + 1
    t = np.sort(np.concatenate([t, changes * GRID_MINUTES, [0.0]]))
    k = np.minimum((t // GRID_MINUTES).astype(int), L - 1)
    samples.extend(VitalsSample("vent_mode", round(float(a), 2), float(traj.latent[kk, N_SIGNALS + 1]))
                   for a, kk in zip(t, k))
    samples.sort(key=lambda s: (s.time, s.signal_id))
    return tuple(samples)


def trajectory_to_episode(traj, config, replicate=0):
    p = traj.patient
    return PatientEpisode(
        admission_id=p.admission_id,
        age=p.age,
        weight=p.weight,
        gender_flag=p.gender_flag,
        emergency_flag=p.emergency_flag,
        white_flag=p.white_flag,
        samples=_measurements(traj, config, replicate),
        vent_intervals=_vent_intervals(traj),
        sedation_events=_sedation_events(traj),
        discharged_alive=p.discharged_alive,
        discharge_min=float(traj.discharge_min),
    )


def simulate_cohort(config: SimConfig):
    """Logged admissions generated by the built-in clinician policy."""
    patients = sample_patients(config)
    trajs = run_simulation(config, patients)
    return [trajectory_to_episode(tr, config) for tr in trajs]


def simulate_cohort_with_truth(config: SimConfig):
    """Like :func:`simulate_cohort` but also returns patients and trajectories."""
    patients = sample_patients(config)
    trajs = run_simulation(config, patients)
    return [trajectory_to_episode(tr, config) for tr in trajs], patients, trajs
