"""Versioned, byte-reproducible model files.

A model file is a zip archive holding ``meta.json`` plus one ``.npy`` member
per array. Members are written in sorted order with a fixed timestamp, so the
same model always serializes to the same bytes.

``meta.json`` carries ``schema_version``, ``kind`` (``qfunction`` or
``policy``), ``regressor`` (``trees`` or ``network``), the reward and run
config hashes, and the scalar parameters needed to rebuild the object.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .errors import ArtifactError
from .fqi import ENCODING_VERSION, NETWORK, TREES, QFunction
from .policy import PolicyModel
from .regressors import MLPModel, TreeEnsemble, TreeEnsembleParams
from .schema import SCHEMA_VERSION

_EPOCH = (1980, 1, 1, 0, 0, 0)
_TREE_ARRAYS = ("classes", "roots", "feature", "threshold", "left", "right", "value",
                "n_samples", "decrease")


def write_archive(path, meta, arrays):
    members = {"meta.json": json.dumps(meta, sort_keys=True, indent=2).encode() + b"\n"}
    for name, arr in arrays.items():
        buf = io.BytesIO()
        np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
        members[f"{name}.npy"] = buf.getvalue()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(members):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, members[name])


def read_archive(path):
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                                 allow_pickle=False)
    except (OSError, KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise ArtifactError(f"{path}: unreadable model file ({exc})") from None
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactError(f"{path}: schema version {meta.get('schema_version')} != {SCHEMA_VERSION}")
    return meta, arrays


def _tree_payload(ens, prefix=""):
    p = ens.params
    meta = {"n_trees": p.n_trees, "k_features": p.k_features, "min_leaf": p.min_leaf,
            "seed": int(p.seed), "task": p.task, "n_features": ens.n_features,
            "n_outputs": ens.n_outputs}
    return meta, {prefix + k: getattr(ens, k) for k in _TREE_ARRAYS}


def _tree_from(meta, arrays, prefix=""):
    params = TreeEnsembleParams(meta["n_trees"], meta["k_features"], meta["min_leaf"],
                                meta["seed"], meta["task"])
    return TreeEnsemble(params=params, n_features=meta["n_features"], n_outputs=meta["n_outputs"],
                        **{k: arrays[prefix + k] for k in _TREE_ARRAYS})


def _network_payload(net):
    meta = {"sizes": list(net.sizes), "lr": net.lr, "l2": net.l2, "beta1": net.beta1,
            "beta2": net.beta2, "eps": net.eps, "seed": net.seed, "y_mean": net.y_mean,
            "y_scale": net.y_scale, "step": net.step}
    arrays = {"x_mean": net.x_mean, "x_scale": net.x_scale}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"W{i}"], arrays[f"b{i}"] = w, b
    for i, (m, v) in enumerate(zip(net.m, net.v)):
        arrays[f"m{i}"], arrays[f"v{i}"] = m, v
    return meta, arrays


def _network_from(meta, arrays):
    n_layers = len(meta["sizes"]) - 1
    n_params = 2 * n_layers
    return MLPModel(
        sizes=tuple(meta["sizes"]),
        weights=[arrays[f"W{i}"] for i in range(n_layers)],
        biases=[arrays[f"b{i}"] for i in range(n_layers)],
        lr=meta["lr"], l2=meta["l2"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
        seed=meta["seed"], x_mean=arrays["x_mean"], x_scale=arrays["x_scale"],
        y_mean=meta["y_mean"], y_scale=meta["y_scale"], step=meta["step"],
        m=[arrays[f"m{i}"] for i in range(n_params)],
        v=[arrays[f"v{i}"] for i in range(n_params)],
    )


def save_qfunction(q, path, reward_hash="", config_hash="", extra=None):
    if q.kind == TREES:
        pm, arrays = _tree_payload(q.model)
    else:
        pm, arrays = _network_payload(q.model)
    meta = {"schema_version": SCHEMA_VERSION, "kind": "qfunction", "regressor": q.kind,
            "gamma": q.gamma, "encoding_version": q.encoding_version, "params": pm,
            "reward_hash": reward_hash, "config_hash": config_hash, **(extra or {})}
    write_archive(path, meta, arrays)


def load_qfunction(path, expected_reward_hash=None):
    meta, arrays = read_archive(path)
    if meta.get("kind") != "qfunction":
        raise ArtifactError(f"{path}: not a Q-function file (kind={meta.get('kind')!r})")
    if meta.get("encoding_version") != ENCODING_VERSION:
        raise ArtifactError(f"{path}: input encoding {meta.get('encoding_version')} != {ENCODING_VERSION}")
    _check_hash(path, meta, expected_reward_hash)
    if meta["regressor"] == TREES:
        model = _tree_from(meta["params"], arrays)
    elif meta["regressor"] == NETWORK:
        model = _network_from(meta["params"], arrays)
    else:
        raise ArtifactError(f"{path}: unknown regressor {meta['regressor']!r}")
    return QFunction(meta["regressor"], model, meta["gamma"]), meta


def save_policy(policy, path, reward_hash="", config_hash=""):
    pm, arrays = _tree_payload(policy.ensemble)
    arrays["importances"] = policy.importances
    meta = {"schema_version": SCHEMA_VERSION, "kind": "policy", "params": pm,
            "provenance": policy.provenance, "reward_hash": reward_hash,
            "config_hash": config_hash}
    write_archive(path, meta, arrays)


def load_policy(path, expected_reward_hash=None):
    meta, arrays = read_archive(path)
    if meta.get("kind") != "policy":
        raise ArtifactError(f"{path}: not a policy file (kind={meta.get('kind')!r})")
    _check_hash(path, meta, expected_reward_hash)
    ens = _tree_from(meta["params"], arrays)
    return PolicyModel(ens, arrays["importances"], meta.get("provenance", {})), meta


def _check_hash(path, meta, expected):
    if expected is not None and meta.get("reward_hash") != expected:
        raise ArtifactError(f"{path}: built with reward config {meta.get('reward_hash')}, "
                            f"current config is {expected}")
