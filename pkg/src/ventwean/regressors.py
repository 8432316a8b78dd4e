"""Function approximators: extremely randomized trees and a small MLP.

Trees are grown by a numba kernel. Both regression and classification use the
same split score: for a node with per-output target sums ``S`` over ``n``
samples, a split into ``L``/``R`` gains ``|S_L|^2/n_L + |S_R|^2/n_R - |S|^2/n``,
which is the reduction of the summed squared error for regression and the
reduction of ``n * gini`` when targets are one-hot class indicators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import ConfigError, DivergenceError, ValidationError

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class TreeEnsembleParams:
    n_trees: int = 50
    k_features: int | None = None   # None: d for regression, ceil(sqrt(d)) for classification
    min_leaf: int = 20
    seed: int = 0
    task: str = REGRESSION

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ConfigError("min_leaf must be >= 1")
        if self.k_features is not None and self.k_features < 1:
            raise ConfigError("k_features must be >= 1")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ConfigError(f"unknown task {self.task!r}")

    def resolve_k(self, d):
        if self.k_features is None:
            return d if self.task == REGRESSION else int(math.ceil(math.sqrt(d)))
        if self.k_features > d:
            raise ConfigError(f"k_features={self.k_features} exceeds input dimension {d}")
        return self.k_features


@dataclass(frozen=True)
class TreeEnsemble:
    """Flattened forest. Node ``i`` is a leaf when ``feature[i] < 0``.

    ``left``/``right`` are global node indices; tree ``t`` is rooted at
    ``roots[t]``. ``value`` holds leaf means (regression, one column) or class
    frequencies (classification). ``decrease`` records each split's weighted
    impurity decrease divided by the tree's sample count.
    """

    params: TreeEnsembleParams
    n_features: int
    n_outputs: int
    classes: np.ndarray
    roots: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    decrease: np.ndarray

    @property
    def n_trees(self):
        return len(self.roots)

    @property
    def n_nodes(self):
        return len(self.feature)

    def tree_nodes(self, t):
        """Global node index range of tree ``t``."""
        end = self.roots[t + 1] if t + 1 < len(self.roots) else self.n_nodes
        return range(int(self.roots[t]), int(end))


# ------------------------------------------------------------- numba kernels

@numba.njit(cache=True)
def _splitmix(state):
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _uniform(state):
    return (_splitmix(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _randint(state, n):
    return np.int64(_splitmix(state) % np.uint64(n))


@numba.njit(cache=True)
def _kth_extremes(vals, m, k, small, large):
    # k-th smallest and k-th largest of vals[:m] via two sorted k-buffers;
    # most elements are rejected by a single comparison.
    for i in range(k):
        small[i] = np.inf
        large[i] = -np.inf
    for i in range(m):
        v = vals[i]
        if v < small[k - 1]:
            j = k - 1
            while j > 0 and small[j - 1] > v:
                small[j] = small[j - 1]
                j -= 1
            small[j] = v
        if v > large[k - 1]:
            j = k - 1
            while j > 0 and large[j - 1] < v:
                large[j] = large[j - 1]
                j -= 1
            large[j] = v
    return small[k - 1], large[k - 1]


@numba.njit(cache=True)
def _draw_threshold(a, b, state):
    # Uniform on (a, b]. Rounding can land on a (u == 0, or a and b adjacent
    # floats); b keeps everything <= a on the left and is always valid.
    t = a + (b - a) * _uniform(state)
    if t <= a or t > b:
        t = b
    return t


@numba.njit(cache=True)
def _split_sums(vals, Yw, m, t, sl):
    # Branch-free accumulation: split outcomes are close to coin flips.
    n_out = Yw.shape[1]
    nl = 0
    if n_out == 1:
        acc = 0.0
        for i in range(m):
            w = vals[i] < t
            nl += w
            acc += w * Yw[i, 0]
        sl[0] = acc
        return nl
    sl[:] = 0.0
    for i in range(m):
        w = vals[i] < t
        nl += w
        for o in range(n_out):
            sl[o] += w * Yw[i, o]
    return nl


@numba.njit(cache=True)
def _grow_tree(XT, Y, min_leaf, k_features, seed):
    # XT is feature-major (d, n). Node samples are the slice idx[lo:hi]; each
    # candidate feature is gathered into the contiguous buffer ``vals``.
    d, n = XT.shape
    n_out = Y.shape[1]
    cap = 2 * (n // min_leaf) + 1
    feature = np.full(cap, -1, dtype=np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros((cap, n_out))
    count = np.zeros(cap, dtype=np.int64)
    decrease = np.zeros(cap)

    state = np.empty(1, dtype=np.uint64)
    state[0] = seed
    small = np.empty(min_leaf)
    large = np.empty(min_leaf)
    idx = np.arange(n)
    spill = np.empty(n, dtype=np.int64)
    vals = np.empty(n)
    Yw = np.empty((n, n_out))
    order = np.arange(d)
    sums = np.empty(n_out)
    sl = np.empty(n_out)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_lo = np.empty(cap, dtype=np.int64)
    stack_hi = np.empty(cap, dtype=np.int64)
    stack_node[0], stack_lo[0], stack_hi[0] = 0, 0, n
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node, lo, hi = stack_node[top], stack_lo[top], stack_hi[top]
        m = hi - lo
        count[node] = m
        sums[:] = 0.0
        for i in range(m):
            for o in range(n_out):
                Yw[i, o] = Y[idx[lo + i], o]
                sums[o] += Yw[i, o]
        for o in range(n_out):
            value[node, o] = sums[o] / m
        if m < 2 * min_leaf:
            continue
        # Pure node: nothing to gain.
        pure = True
        for i in range(1, m):
            for o in range(n_out):
                if Yw[i, o] != Yw[0, o]:
                    pure = False
                    break
            if not pure:
                break
        if pure:
            continue
        parent = 0.0
        for o in range(n_out):
            parent += sums[o] * sums[o]
        parent /= m

        best_score = -np.inf
        best_f = -1
        best_t = 0.0
        n_valid = 0
        # Random feature order (Fisher-Yates); scan until k usable features.
        for j in range(d):
            order[j] = j
        for j in range(d):
            if n_valid >= k_features:
                break
            r = j + _randint(state, d - j)
            order[j], order[r] = order[r], order[j]
            f = order[j]
            row = XT[f]
            for i in range(m):
                vals[i] = row[idx[lo + i]]
            lo_v = vals[0]
            hi_v = lo_v
            for i in range(1, m):
                lo_v = min(lo_v, vals[i])
                hi_v = max(hi_v, vals[i])
            if not lo_v < hi_v:
                continue
            n_valid += 1
            t = _draw_threshold(lo_v, hi_v, state)
            nl = _split_sums(vals, Yw, m, t, sl)
            if nl < min_leaf or m - nl < min_leaf:
                # Redraw inside the range that leaves min_leaf samples per side.
                a, b = _kth_extremes(vals, m, min_leaf, small, large)
                if not a < b:
                    n_valid -= 1
                    continue
                t = _draw_threshold(a, b, state)
                nl = _split_sums(vals, Yw, m, t, sl)
            nr = m - nl
            ql = 0.0
            qr = 0.0
            for o in range(n_out):
                ql += sl[o] * sl[o]
                sr = sums[o] - sl[o]
                qr += sr * sr
            score = ql / nl + qr / nr - parent
            better = score > best_score
            if score == best_score and (f < best_f or (f == best_f and t < best_t)):
                better = True
            if better:
                best_score, best_f, best_t = score, f, t
        if best_f < 0:
            continue
        # Stable partition keeps idx ascending inside every node, so the
        # gathers above walk memory forward.
        row = XT[best_f]
        il = lo
        ir = 0
        for i in range(lo, hi):
            k = idx[i]
            if row[k] < best_t:
                idx[il] = k
                il += 1
            else:
                spill[ir] = k
                ir += 1
        idx[il:hi] = spill[:ir]
        mid = il
        feature[node] = best_f
        threshold[node] = best_t
        decrease[node] = best_score
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # Push right first so the left subtree is numbered first.
        stack_node[top], stack_lo[top], stack_hi[top] = n_nodes + 1, mid, hi
        top += 1
        stack_node[top], stack_lo[top], stack_hi[top] = n_nodes, lo, mid
        top += 1
        n_nodes += 2
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], count[:n_nodes], decrease[:n_nodes])


@numba.njit(cache=True)
def _predict(X, roots, feature, threshold, left, right, value):
    n = X.shape[0]
    n_out = value.shape[1]
    out = np.zeros((n, n_out))
    # Tree-major order keeps one tree's nodes hot in cache.
    for t in range(roots.shape[0]):
        for i in range(n):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            for o in range(n_out):
                out[i, o] += value[node, o]
    return out / roots.shape[0]


# ------------------------------------------------------------------ trees

def _tree_seeds(seed, n_trees):
    return np.random.SeedSequence(seed).generate_state(n_trees, dtype=np.uint64)


def et_fit(X, y, params: TreeEnsembleParams = TreeEnsembleParams()):
    """Fit an Extra-Trees ensemble on the full sample (no bootstrap)."""
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValidationError(f"X must be a non-empty 2-d array, got shape {X.shape}")
    y = np.asarray(y)
    if len(y) != len(X):
        raise ValidationError(f"X has {len(X)} rows but y has {len(y)}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("X contains non-finite values")
    n, d = X.shape
    if params.task == REGRESSION:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise ValidationError("y contains non-finite values")
        Y = np.ascontiguousarray(y.reshape(n, 1))
        classes = np.zeros(0)
    else:
        classes, codes = np.unique(y, return_inverse=True)
        Y = np.zeros((n, len(classes)))
        Y[np.arange(n), codes] = 1.0
    k = params.resolve_k(d)
    XT = np.ascontiguousarray(X.T)
    parts = [_grow_tree(XT, Y, params.min_leaf, k, s) for s in _tree_seeds(params.seed, params.n_trees)]
    sizes = np.array([len(p[0]) for p in parts])
    roots = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    left = np.concatenate([np.where(p[2] >= 0, p[2] + r, -1) for p, r in zip(parts, roots)])
    right = np.concatenate([np.where(p[3] >= 0, p[3] + r, -1) for p, r in zip(parts, roots)])
    return TreeEnsemble(
        params=params,
        n_features=d,
        n_outputs=Y.shape[1],
        classes=classes,
        roots=roots,
        feature=np.concatenate([p[0] for p in parts]),
        threshold=np.concatenate([p[1] for p in parts]),
        left=left.astype(np.int32),
        right=right.astype(np.int32),
        value=np.concatenate([p[4] for p in parts]),
        n_samples=np.concatenate([p[5] for p in parts]),
        decrease=np.concatenate([p[6] / n for p in parts]),
    )


def _check_input(X, d):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != d:
        raise ValidationError(f"expected {d} features, got {X.shape[1]}")
    return np.ascontiguousarray(X), single


def et_predict(ens: TreeEnsemble, X):
    """Ensemble average: values for regression, class probabilities otherwise.

    A single input row gives a scalar (regression) or one probability vector.
    """
    X, single = _check_input(X, ens.n_features)
    out = _predict(X, ens.roots, ens.feature, ens.threshold, ens.left, ens.right, ens.value)
    if ens.params.task == REGRESSION:
        out = out[:, 0]
        return float(out[0]) if single else out
    return out[0] if single else out


def et_classify(ens: TreeEnsemble, X):
    """Most probable class label (ties go to the smallest label)."""
    p = np.atleast_2d(et_predict(ens, X))
    return ens.classes[np.argmax(p, axis=1)]


def gini_importance(ens: TreeEnsemble):
    """Per-feature impurity decrease, normalized per tree, averaged, summing to 1."""
    total = np.zeros(ens.n_features)
    for t in range(ens.n_trees):
        nodes = np.asarray(ens.tree_nodes(t))
        split = nodes[ens.feature[nodes] >= 0]
        imp = np.bincount(ens.feature[split], weights=ens.decrease[split], minlength=ens.n_features)
        s = imp.sum()
        if s > 0:
            total += imp / s
    s = total.sum()
    return total / s if s > 0 else total


# ------------------------------------------------------------------- MLP

@dataclass
class MLPModel:
    """Feed-forward ReLU network with a linear scalar output.

    Inputs are z-scored with ``x_mean``/``x_scale`` and the output is
    ``y_mean + y_scale * net(z)``; both are fixed when the model is created.
    ``m``/``v`` are Adam moment accumulators, ``step`` the update counter.
    """

    sizes: tuple
    weights: list
    biases: list
    lr: float = 1e-3
    l2: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    y_mean: float = 0.0
    y_scale: float = 1.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def copy(self):
        return replace(
            self,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            m=[a.copy() for a in self.m],
            v=[a.copy() for a in self.v],
        )

    @property
    def params(self):
        return self.weights + self.biases


def mlp_init(n_inputs, hidden=(64, 64), seed=0, lr=1e-3, l2=1e-4, x_mean=None, x_scale=None,
             y_mean=0.0, y_scale=1.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """He-initialized network ``n_inputs -> hidden... -> 1``."""
    if n_inputs < 1 or any(h < 1 for h in hidden):
        raise ConfigError("layer sizes must be positive")
    if lr < 0 or l2 < 0:
        raise ConfigError("lr and l2 must be non-negative")
    sizes = (n_inputs, *hidden, 1)
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, math.sqrt(2.0 / a), (a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    x_mean = np.zeros(n_inputs) if x_mean is None else np.asarray(x_mean, dtype=float)
    x_scale = np.ones(n_inputs) if x_scale is None else np.asarray(x_scale, dtype=float)
    if np.any(x_scale <= 0) or y_scale <= 0:
        raise ConfigError("scales must be positive")
    model = MLPModel(sizes, weights, biases, lr=lr, l2=l2, beta1=beta1, beta2=beta2, eps=eps,
                     seed=seed, x_mean=x_mean, x_scale=x_scale, y_mean=float(y_mean),
                     y_scale=float(y_scale))
    model.m = [np.zeros_like(p) for p in model.params]
    model.v = [np.zeros_like(p) for p in model.params]
    return model


def input_scaling(X):
    """Training-set mean and standard deviation (constant columns get scale 1)."""
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0)
    return X.mean(axis=0), np.where(sd > 0, sd, 1.0)


def _forward(model, Z):
    acts = [Z]
    h = Z
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def mlp_predict(model: MLPModel, X):
    """Network output in target units; scalar for a single input row."""
    X, single = _check_input(X, model.sizes[0])
    Z = (X - model.x_mean) / model.x_scale
    out = model.y_mean + model.y_scale * _forward(model, Z)[-1][:, 0]
    return float(out[0]) if single else out


def mlp_loss_and_grad(model: MLPModel, X, y):
    """Objective ``mean((net - y_std)^2) + l2 * sum ||W||^2`` and its gradients.

    The squared error is taken on standardized targets
    ``(y - y_mean) / y_scale``. Gradients are ordered as ``model.params``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = (np.asarray(y, dtype=float).reshape(-1) - model.y_mean) / model.y_scale
    Z = (X - model.x_mean) / model.x_scale
    acts = _forward(model, Z)
    n = len(X)
    err = acts[-1][:, 0] - t
    loss = float(np.mean(err ** 2)) + model.l2 * sum(float(np.sum(W * W)) for W in model.weights)
    delta = (2.0 / n) * err[:, None]
    gw = [None] * len(model.weights)
    gb = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta + 2.0 * model.l2 * model.weights[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return loss, gw + gb


def adam_step(model: MLPModel, grads):
    """One bias-corrected adaptive-moment update, in place."""
    model.step += 1
    b1, b2 = model.beta1, model.beta2
    c1 = 1.0 - b1 ** model.step
    c2 = 1.0 - b2 ** model.step
    for p, g, m, v in zip(model.params, grads, model.m, model.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= model.lr * (m / c1) / (np.sqrt(v / c2) + model.eps)


def mlp_mse(model, X, y):
    pred = mlp_predict(model, np.atleast_2d(X))
    return float(np.mean((pred - np.asarray(y, dtype=float).reshape(-1)) ** 2))


def mlp_fit_epoch(model: MLPModel, X, y, batch_size=64, rng=None):
    """One pass of mini-batch Adam over ``(X, y)``; returns ``(model, mse)``.

    Batches follow a permutation drawn from ``rng`` (a fresh generator seeded
    with ``model.seed + model.step`` when omitted). The model is updated in
    place and also returned; the MSE is measured in target units after the
    epoch.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[1] != model.sizes[0]:
        raise ValidationError(f"expected {model.sizes[0]} features, got {X.shape[1]}")
    if len(X) != len(y):
        raise ValidationError(f"X has {len(X)} rows but y has {len(y)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("training data contains non-finite values")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(model.seed + model.step)
    order = rng.permutation(len(X))
    for start in range(0, len(X), batch_size):
        b = order[start:start + batch_size]
        loss, grads = mlp_loss_and_grad(model, X[b], y[b])
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at optimizer step {model.step + 1} "
                                  f"(batch of {len(b)}, lr={model.lr})")
        adam_step(model, grads)
    mse = mlp_mse(model, X, y)
    if not math.isfinite(mse):
        raise DivergenceError(f"non-finite training MSE after step {model.step} (lr={model.lr})")
    return model, mse
