import numpy as np
import pytest

from ventwean.errors import ValidationError
from ventwean.fqi import ConstantQ
from ventwean.mdp import Action
from ventwean.policy import (
    action_probabilities, extract_policy, feature_importances, fit_policy, recommend,
    recommend_batch, write_importances,
)
from ventwean.regressors import CLASSIFICATION, TreeEnsembleParams
from ventwean.schema import FEATURE_INDEX, STATE_DIM, STATE_FEATURES


class ThresholdQ:
    """Prefers ``high`` when the feature exceeds ``cut`` and ``low`` otherwise."""

    gamma = 0.99

    def __init__(self, feature, cut, low=0, high=4):
        self.j, self.cut, self.low, self.high = FEATURE_INDEX[feature], cut, low, high

    def q_values(self, states):
        states = np.atleast_2d(states)
        out = np.zeros((len(states), 8))
        above = states[:, self.j] > self.cut
        out[above, self.high] = 1.0
        out[~above, self.low] = 1.0
        return out


def random_states(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, STATE_DIM))
    X[:, FEATURE_INDEX["peep_set"]] = rng.uniform(0, 15, n)
    X[:, FEATURE_INDEX["arterial_ph"]] = rng.uniform(7.0, 7.8, n)
    return X


def test_constant_q_gives_constant_policy():
    pol = extract_policy(ConstantQ(0.0), random_states(50, 0))
    assert recommend_batch(pol, random_states(20, 1)).tolist() == [[0, 0]] * 20
    assert not pol.importances.any()


def test_threshold_rule_recovered_on_held_out_states():
    q = ThresholdQ("peep_set", 8.0)
    pol = extract_policy(q, random_states(2000, 2))
    test = random_states(1000, 3)
    truth = np.argmax(q.q_values(test), axis=1)
    rec = recommend_batch(pol, test)
    assert np.mean(4 * rec[:, 0] + rec[:, 1] == truth) >= 0.99
    assert feature_importances(pol)[0][0] == "peep_set"


def test_dominant_feature_ranked_first():
    pol = extract_policy(ThresholdQ("arterial_ph", 7.35, low=5, high=2), random_states(1500, 4))
    ranking = feature_importances(pol)
    assert ranking[0][0] == "arterial_ph"
    assert len(ranking) == STATE_DIM
    assert sorted(n for n, _ in ranking) == sorted(STATE_FEATURES)
    assert sum(w for _, w in ranking) == pytest.approx(1.0)


def test_probabilities_cover_all_actions():
    pol = extract_policy(ThresholdQ("peep_set", 8.0, low=1, high=6), random_states(300, 5))
    P = action_probabilities(pol, random_states(40, 6))
    assert P.shape == (40, 8)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert not P[:, [0, 2, 3, 4, 5, 7]].any()


def test_recommend_single_state():
    pol = extract_policy(ThresholdQ("peep_set", 8.0), random_states(300, 7))
    s = np.zeros(STATE_DIM)
    s[FEATURE_INDEX["peep_set"]] = 14.0
    action, probs = recommend(pol, s)
    assert action == Action(1, 0)
    assert probs.shape == (8,) and probs[4] == probs.max()
    with pytest.raises(ValidationError):
        recommend(pol, np.zeros((2, STATE_DIM)))


def test_training_labels_reproduced():
    X = random_states(200, 8)
    y = np.random.default_rng(9).integers(0, 8, 200)
    pol = fit_policy(X, y)
    assert np.array_equal(4 * recommend_batch(pol, X)[:, 0] + recommend_batch(pol, X)[:, 1], y)


def test_empty_or_misshaped_states_rejected():
    with pytest.raises(ValidationError):
        extract_policy(ConstantQ(0.0), np.zeros((0, STATE_DIM)))
    with pytest.raises(ValidationError):
        extract_policy(ConstantQ(0.0), np.zeros((3, 5)))
    with pytest.raises(ValidationError):
        fit_policy(np.zeros((3, STATE_DIM)), [0, 1, 2], TreeEnsembleParams(task="regression"))


def test_fixed_seed_is_deterministic():
    X = random_states(300, 10)
    params = TreeEnsembleParams(20, None, 1, 4, CLASSIFICATION)
    a = extract_policy(ThresholdQ("peep_set", 8.0), X, params)
    b = extract_policy(ThresholdQ("peep_set", 8.0), X, params)
    np.testing.assert_array_equal(a.importances, b.importances)


def test_importances_file(tmp_path):
    pol = extract_policy(ThresholdQ("peep_set", 8.0), random_states(300, 11))
    write_importances(pol, tmp_path / "imp.csv")
    lines = (tmp_path / "imp.csv").read_text().splitlines()
    assert lines[0] == "feature,weight"
    assert len(lines) == STATE_DIM + 1
    assert lines[1].startswith("peep_set,")
