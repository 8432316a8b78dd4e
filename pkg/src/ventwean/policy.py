"""Distilling a Q-function into a tree-ensemble classifier over states."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .fqi import greedy_indices
from .mdp import Action
from .regressors import CLASSIFICATION, TreeEnsembleParams, et_fit, et_predict, gini_importance
from .schema import ACTIONS, N_ACTIONS, STATE_DIM, STATE_FEATURES

log = logging.getLogger(__name__)


def default_policy_params(seed=0):
    return TreeEnsembleParams(n_trees=100, min_leaf=1, seed=seed, task=CLASSIFICATION)


@dataclass(frozen=True)
class PolicyModel:
    """Classifier from 32-feature states to the 8 joint actions.

    ``classes`` lists the action indices seen in the labels; the probability
    vectors returned by :func:`recommend` always cover all 8 actions.
    """

    ensemble: object
    importances: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def classes(self):
        return self.ensemble.classes.astype(int)


def extract_policy(q, states, params: TreeEnsembleParams | None = None, provenance=None):
    """Label ``states`` with greedy actions of ``q`` and fit the classifier."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] == 0:
        raise ValidationError("extract_policy needs at least one state")
    if states.shape[1] != STATE_DIM:
        raise ValidationError(f"expected {STATE_DIM} state features, got {states.shape[1]}")
    labels = greedy_indices(q, states)
    return fit_policy(states, labels, params, provenance)


def fit_policy(states, labels, params=None, provenance=None):
    """Fit the classifier on given action-index labels."""
    params = params or default_policy_params()
    if params.task != CLASSIFICATION:
        raise ValidationError("policy classifier needs task='classification'")
    labels = np.asarray(labels, dtype=int)
    if len(np.unique(labels)) == 1:
        log.info("all %d states share action %s; policy is constant", len(labels),
                 ACTIONS[labels[0]])
    ens = et_fit(states, labels, params)
    return PolicyModel(ens, gini_importance(ens), dict(provenance or {}))


def action_probabilities(policy, states):
    """``(n, 8)`` class probabilities in action-index order."""
    p = np.atleast_2d(et_predict(policy.ensemble, np.atleast_2d(states)))
    out = np.zeros((len(p), N_ACTIONS))
    out[:, policy.classes] = p
    return out


def recommend_indices(policy, states):
    return np.argmax(action_probabilities(policy, states), axis=1)


def recommend(policy, state):
    """``(Action, probabilities)`` for one state."""
    state = np.asarray(state, dtype=float)
    if state.ndim != 1:
        raise ValidationError("recommend takes a single state vector")
    p = action_probabilities(policy, state)[0]
    return Action.from_index(int(np.argmax(p))), p


def recommend_batch(policy, states):
    """``(n, 2)`` integer actions for a batch of states (simulator policy form)."""
    return np.array(ACTIONS, dtype=int)[recommend_indices(policy, states)]


def feature_importances(policy):
    """``(feature, weight)`` pairs, heaviest first; ties keep schema order."""
    w = policy.importances
    order = sorted(range(len(w)), key=lambda j: (-w[j], j))
    return [(STATE_FEATURES[j], float(w[j])) for j in order]


def write_importances(policy, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["feature", "weight"])
        for name, weight in feature_importances(policy):
            wr.writerow([name, repr(weight)])
