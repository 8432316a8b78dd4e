"""Per-admission multi-output GP imputation onto a 10-minute grid.

Continuous signals share one linear-model-of-coregionalization kernel,
``K = sum_q B_q (x) k_q``, with spectral basis kernels
``k_q(tau) = exp(-2 pi^2 tau^2 v_q) cos(2 pi tau mu_q)`` (tau in minutes,
``mu_q`` in cycles per minute) and ``B_q = A_q A_q^T + diag(d_q)``.
Hyperparameters maximize the zero-mean Gaussian log marginal likelihood of
the admission's own observations. Discrete signals (RASS, ventilator mode)
are mean-binned and held forward instead.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, LinAlgError
from scipy.optimize import minimize

from .errors import NumericalError
from .schema import (
    DISCRETE_DEFAULTS, DISCRETE_SIGNALS, GRID_MINUTES, N_SIGNALS, SCHEMA_VERSION,
    SIGNAL_CENTER, SIGNAL_NAMES, SIGNAL_SCALE,
)

log = logging.getLogger(__name__)

TWO_PI_SQ = 2.0 * math.pi ** 2
JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True)
class SpectralBasisParams:
    v: float
    mu: float

    def __post_init__(self):
        if not self.v >= 0:
            raise ValueError("bandwidth v must be non-negative")


def basis_kernel(tau, params):
    """Spectral basis kernel value(s) at lag ``tau`` (minutes)."""
    tau = np.asarray(tau, dtype=float)
    out = np.exp(-TWO_PI_SQ * tau * tau * params.v) * np.cos(2.0 * math.pi * tau * params.mu)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GPOptConfig:
    Q: int = 2
    rank: int = 5
    max_iter: int = 200
    init_v: tuple = (7.8e-7, 7.8e-7)
    init_mu: tuple = (0.0, 1.0 / 720.0)
    init_diag: float = 1.0
    init_factor_scale: float = 0.1
    init_noise: float = 0.1
    noise_floor: float = 1e-6
    max_observations: int = 2000
    seed: int = 0


@dataclass(frozen=True)
class GPModel:
    """Fitted LMC hyperparameters plus the (standardized) observations they condition on.

    ``values`` are stored as ``(y - center[signal]) / scale[signal]``; predictions
    are mapped back to original units.
    """

    factors: np.ndarray          # (Q, D, R)
    diag: np.ndarray             # (Q, D), non-negative
    basis: tuple                 # Q x SpectralBasisParams
    noise: np.ndarray            # (D,)
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    signals: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    values: np.ndarray = field(default_factory=lambda: np.empty(0))
    center: np.ndarray = None
    scale: np.ndarray = None
    admission_id: str = ""
    log_likelihood: float = float("nan")
    trace: tuple = ()

    def __post_init__(self):
        D = self.noise.shape[0]
        if self.center is None:
            object.__setattr__(self, "center", np.zeros(D))
        if self.scale is None:
            object.__setattr__(self, "scale", np.ones(D))
        if np.any(self.noise <= 0):
            raise ValueError("noise variances must be positive")
        if np.any(self.diag < 0):
            raise ValueError("diagonal scale terms must be non-negative")

    @property
    def Q(self):
        return len(self.basis)

    @property
    def D(self):
        return self.noise.shape[0]

    @property
    def B(self):
        A = self.factors
        return np.einsum("qdr,qer->qde", A, A) + np.stack([np.diag(d) for d in self.diag])

    def with_observations(self, times, signals, values):
        return replace(self, times=np.asarray(times, float), signals=np.asarray(signals, int),
                       values=np.asarray(values, float))


def _cross(B, basis, t1, s1, t2, s2):
    tau = t1[:, None] - t2[None, :]
    K = np.zeros(tau.shape)
    for q, bp in enumerate(basis):
        K += B[q][np.ix_(s1, s2)] * basis_kernel(tau, bp)
    return K


def lmc_covariance(model, times_by_signal):
    """Joint prior covariance over observations grouped by signal.

    ``times_by_signal`` maps signal index (or name) to an array of times, or is a
    length-D sequence of arrays. Rows/columns are ordered signal by signal.
    Observation noise is not included.
    """
    if isinstance(times_by_signal, dict):
        items = sorted((SIGNAL_NAMES.index(k) if isinstance(k, str) else int(k), np.atleast_1d(v))
                       for k, v in times_by_signal.items())
    else:
        items = [(d, np.atleast_1d(v)) for d, v in enumerate(times_by_signal)]
    t = np.concatenate([np.asarray(v, float) for _, v in items]) if items else np.empty(0)
    s = np.concatenate([np.full(len(v), d, dtype=int) for d, v in items]) if items else np.empty(0, int)
    return _cross(model.B, model.basis, t, s, t, s)


def _chol(K, what=""):
    n = K.shape[0]
    for jitter in JITTER_LADDER:
        try:
            L = cholesky(K + jitter * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                return L, jitter
        except LinAlgError:
            continue
    raise NumericalError(f"covariance not positive definite after jitter {JITTER_LADDER[-1]:g} {what}".strip())


# ------------------------------------------------------------ likelihood

class _Packing:
    def __init__(self, Q, D, R, noise_floor):
        self.Q, self.D, self.R, self.floor = Q, D, R, noise_floor
        self.sizes = (Q * D * R, Q * D, Q, Q, D)

    def unpack(self, theta):
        Q, D, R = self.Q, self.D, self.R
        parts = np.split(theta, np.cumsum(self.sizes)[:-1])
        A = parts[0].reshape(Q, D, R)
        diag = np.exp(parts[1].reshape(Q, D))
        v = np.exp(parts[2])
        mu = parts[3]
        noise = self.floor + np.exp(parts[4])
        return A, diag, v, mu, noise

    def pack(self, A, diag, v, mu, noise):
        return np.concatenate([A.ravel(), np.log(diag).ravel(), np.log(v), np.asarray(mu, float),
                               np.log(np.maximum(noise - self.floor, 1e-300))])


def _neg_lml_and_grad(theta, pk, t, s, y):
    A, diag, v, mu, noise = pk.unpack(theta)
    Q, D = pk.Q, pk.D
    B = np.einsum("qdr,qer->qde", A, A) + np.stack([np.diag(d) for d in diag])
    tau = t[:, None] - t[None, :]
    tau2 = tau * tau
    env = [np.exp(-TWO_PI_SQ * tau2 * v[q]) for q in range(Q)]
    cosp = [np.cos(2 * math.pi * tau * mu[q]) for q in range(Q)]
    kq = [env[q] * cosp[q] for q in range(Q)]
    Bss = [B[q][np.ix_(s, s)] for q in range(Q)]
    K = sum(Bss[q] * kq[q] for q in range(Q)) + np.diag(noise[s])
    L, _ = _chol(K)
    alpha = cho_solve((L, True), y)
    n = len(y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    Kinv = cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    S = np.zeros((n, D))
    S[np.arange(n), s] = 1.0
    gA = np.empty_like(A)
    gdiag = np.empty_like(diag)
    gv = np.empty(Q)
    gmu = np.empty(Q)
    for q in range(Q):
        G = 0.5 * S.T @ (W * kq[q]) @ S
        gA[q] = 2.0 * G @ A[q]
        gdiag[q] = np.diag(G) * diag[q]
        WB = W * Bss[q]
        gv[q] = 0.5 * np.sum(WB * kq[q] * (-TWO_PI_SQ * tau2)) * v[q]
        gmu[q] = 0.5 * np.sum(WB * env[q] * (-np.sin(2 * math.pi * tau * mu[q])) * (2 * math.pi * tau))
    gnoise = 0.5 * np.bincount(s, weights=np.diag(W), minlength=D) * (noise - pk.floor)
    grad = np.concatenate([gA.ravel(), gdiag.ravel(), gv, gmu, gnoise])
    return -lml, -grad


def log_marginal_likelihood(model):
    """Zero-mean Gaussian log marginal likelihood of the model's stored observations."""
    if len(model.values) == 0:
        return 0.0
    pk = _Packing(model.Q, model.D, model.factors.shape[2], 0.0)
    theta = pk.pack(model.factors, np.maximum(model.diag, 1e-300),
                    np.array([b.v for b in model.basis]).clip(1e-300),
                    [b.mu for b in model.basis], model.noise)
    f, _ = _neg_lml_and_grad(theta, pk, model.times, model.signals, model.values)
    return -f


# ---------------------------------------------------------------- fitting

def _standardized_observations(episode, max_obs):
    t, s, y = [], [], []
    center = np.array(SIGNAL_CENTER, dtype=float)
    scale = np.array(SIGNAL_SCALE, dtype=float)
    for d, name in enumerate(SIGNAL_NAMES):
        td, yd = episode.observations(name)
        if len(td):
            center[d] = yd.mean()
            t.append(td)
            s.append(np.full(len(td), d))
            y.append(yd)
    if not t:
        return np.empty(0), np.empty(0, int), np.empty(0), center, scale
    t, s, y = np.concatenate(t), np.concatenate(s), np.concatenate(y)
    order = np.lexsort((s, t))
    t, s, y = t[order], s[order], y[order]
    if len(t) > max_obs:
        keep = np.unique(np.linspace(0, len(t) - 1, max_obs).round().astype(int))
        log.info("admission %s: thinning %d observations to %d for the GP fit",
                 episode.admission_id, len(t), len(keep))
        t, s, y = t[keep], s[keep], y[keep]
    return t, s, (y - center[s]) / scale[s], center, scale


def initial_model(cfg=GPOptConfig(), D=N_SIGNALS):
    rng = np.random.default_rng(cfg.seed)
    return GPModel(
        factors=cfg.init_factor_scale * rng.standard_normal((cfg.Q, D, cfg.rank)),
        diag=np.full((cfg.Q, D), cfg.init_diag),
        basis=tuple(SpectralBasisParams(cfg.init_v[q], cfg.init_mu[q]) for q in range(cfg.Q)),
        noise=np.full(D, cfg.init_noise),
    )


def fit_model(init, times, signals, values, cfg=GPOptConfig(), admission_id=""):
    """Maximize the log marginal likelihood from ``init`` over all hyperparameters."""
    t = np.asarray(times, float)
    s = np.asarray(signals, int)
    y = np.asarray(values, float)
    model = replace(init, times=t, signals=s, values=y, admission_id=admission_id)
    if len(y) < 2:
        raise ValueError("fit_gp needs at least two observations")
    pk = _Packing(init.Q, init.D, init.factors.shape[2], cfg.noise_floor)
    theta0 = pk.pack(init.factors, np.maximum(init.diag, 1e-12),
                     np.array([b.v for b in init.basis]).clip(1e-300),
                     [b.mu for b in init.basis], np.maximum(init.noise, cfg.noise_floor * (1 + 1e-9)))
    trace = []

    def fun(theta):
        # Line-search probes can overflow; such points are rejected below.
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                f, g = _neg_lml_and_grad(theta, pk, t, s, y)
        except NumericalError:
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return 1e25, np.zeros_like(theta)
        return f, g

    try:
        f0, _ = _neg_lml_and_grad(theta0, pk, t, s, y)
    except NumericalError as exc:
        raise NumericalError(f"admission {admission_id}: {exc}") from None
    trace.append(-f0)
    theta = theta0
    if cfg.max_iter > 0:
        res = minimize(fun, theta0, jac=True, method="L-BFGS-B",
                       callback=lambda xk: trace.append(-fun(xk)[0]),
                       options={"maxiter": cfg.max_iter})
        if res.fun <= f0:
            theta = res.x
    A, diag, v, mu, noise = pk.unpack(theta)
    try:
        lml = -_neg_lml_and_grad(theta, pk, t, s, y)[0]
    except NumericalError as exc:
        raise NumericalError(f"admission {admission_id}: {exc}") from None
    return replace(model, factors=A, diag=diag, noise=noise,
                   basis=tuple(SpectralBasisParams(float(v[q]), float(mu[q])) for q in range(len(v))),
                   log_likelihood=float(lml), trace=tuple(trace))


def fit_gp(episode, init=None, opt_config=GPOptConfig()):
    """Fit one LMC model to an admission's twelve continuous signals."""
    t, s, y, center, scale = _standardized_observations(episode, opt_config.max_observations)
    if len(y) < 2:
        raise ValueError(f"admission {episode.admission_id}: fit_gp needs at least two observations")
    init = init if init is not None else initial_model(opt_config)
    model = fit_model(init, t, s, y, opt_config, episode.admission_id)
    return replace(model, center=center, scale=scale)


def posterior_mean(model, query_grid, return_var=False):
    """GP conditional mean of every signal at ``query_grid``; shape ``(D, len(grid))``."""
    g = np.asarray(query_grid, dtype=float)
    D = model.D
    mean = np.zeros((D, len(g)))
    var = None
    B = model.B
    if return_var:
        var = np.tile(np.array([B[:, d, d].sum() for d in range(D)])[:, None], (1, len(g)))
    if len(model.values):
        t, s = model.times, model.signals
        K = _cross(B, model.basis, t, s, t, s) + np.diag(model.noise[s])
        try:
            L, _ = _chol(K)
        except NumericalError as exc:
            raise NumericalError(f"admission {model.admission_id}: {exc}") from None
        alpha = cho_solve((L, True), model.values)
        for d in range(D):
            Ks = _cross(B, model.basis, g, np.full(len(g), d), t, s)
            mean[d] = Ks @ alpha
            if return_var:
                V = cho_solve((L, True), Ks.T)
                var[d] -= np.einsum("ij,ji->i", Ks, V)
    mean = model.center[:, None] + model.scale[:, None] * mean
    if return_var:
        return mean, var * (model.scale ** 2)[:, None]
    return mean


# ------------------------------------------------------------- imputation

@dataclass(frozen=True)
class RegularSeries:
    admission_id: str
    grid: np.ndarray                 # (L,) minutes, spacing 10
    values: np.ndarray               # (L, 14): 12 continuous signals, rass, vent_mode
    columns: tuple = SIGNAL_NAMES + DISCRETE_SIGNALS

    def __len__(self):
        return len(self.grid)

    def column(self, name):
        return self.values[:, self.columns.index(name)]


def make_grid(discharge_min, resolution=GRID_MINUTES):
    n = int(math.ceil(discharge_min / resolution - 1e-9))
    return np.arange(max(n, 1)) * resolution


def resample_hold(times, values, grid, default, resolution=GRID_MINUTES):
    """Mean-bin observations into ``[g, g + resolution)`` and hold forward.

    Bins before the first observation take the first observed bin value.
    """
    out = np.full(len(grid), np.nan)
    if len(times):
        idx = np.floor((np.asarray(times) - grid[0]) / resolution).astype(int)
        ok = (idx >= 0) & (idx < len(grid))
        sums = np.bincount(idx[ok], weights=np.asarray(values)[ok], minlength=len(grid))
        cnt = np.bincount(idx[ok], minlength=len(grid))
        has = cnt > 0
        out[has] = sums[has] / cnt[has]
    if np.all(np.isnan(out)):
        return np.full(len(grid), float(default))
    first = np.flatnonzero(~np.isnan(out))[0]
    out[:first] = out[first]
    for k in range(first + 1, len(out)):
        if np.isnan(out[k]):
            out[k] = out[k - 1]
    return out


def impute_episode(episode, grid_resolution=GRID_MINUTES, opt_config=GPOptConfig()):
    """Complete regular series for one admission, from admission to discharge."""
    grid = make_grid(episode.discharge_min, grid_resolution)
    t, s, y, center, scale = _standardized_observations(episode, opt_config.max_observations)
    init = initial_model(opt_config)
    if len(y) >= 2 and opt_config.max_iter > 0:
        model = fit_model(init, t, s, y, opt_config, episode.admission_id)
    else:
        model = replace(init, times=t, signals=s, values=y, admission_id=episode.admission_id)
    model = replace(model, center=center, scale=scale)
    cont = posterior_mean(model, grid).T
    disc = np.column_stack([
        resample_hold(*episode.observations(name), grid, DISCRETE_DEFAULTS[name], grid_resolution)
        for name in DISCRETE_SIGNALS])
    values = np.hstack([cont, disc])
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"admission {episode.admission_id}: non-finite imputed values")
    return RegularSeries(episode.admission_id, grid, values)


def impute_cohort(episodes, opt_config=GPOptConfig(), threads=1):
    """Impute every admission; results keep the input order."""
    if threads <= 1:
        return [impute_episode(ep, opt_config=opt_config) for ep in episodes]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ep: impute_episode(ep, opt_config=opt_config), episodes))


def write_imputed(series_list, path, header_lines=()):
    cols = SIGNAL_NAMES + DISCRETE_SIGNALS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("admission_id", "time_min") + cols)
        for ser in series_list:
            for k, t in enumerate(ser.grid):
                w.writerow([ser.admission_id, repr(float(t)), *map(repr, ser.values[k].tolist())])


def read_imputed(path):
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(ln for ln in fh if not ln.startswith("#"))
        header = next(reader, None)
        if header is None:
            return []
        for row in reader:
            rows.setdefault(row[0], []).append([float(x) for x in row[1:]])
    out = []
    for aid, r in rows.items():
        M = np.array(r)
        out.append(RegularSeries(aid, M[:, 0], M[:, 1:], tuple(header[2:])))
    return out
