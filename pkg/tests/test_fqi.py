import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ventwean.errors import ConfigError, ValidationError
from ventwean.fqi import (
    ConstantQ, ConvergenceTrace, FqiConfig, NetworkParams, QFunction, QLearningConfig,
    bellman_targets, encode, encode_all_actions, fqi_train, greedy_action, greedy_indices,
    q_learning_train, read_trace, write_trace,
)
from ventwean.mdp import Action, TransitionSet
from ventwean.regressors import TreeEnsembleParams, mlp_init
from ventwean.schema import ACTIONS, STATE_DIM


def states_for(ids):
    """State vectors whose first feature is the tabular state id."""
    x = np.zeros((len(ids), STATE_DIM))
    x[:, 0] = ids
    return x


def tabular(s, a, s2, r, terminal=None, aid="x"):
    s, a, s2 = (np.asarray(v, dtype=int) for v in (s, a, s2))
    n = len(s)
    ids = np.empty(n, dtype=object)
    ids[:] = aid
    term = np.zeros(n, bool) if terminal is None else np.asarray(terminal, bool)
    return TransitionSet(ids, np.arange(n), states_for(s), np.array(ACTIONS)[a],
                         states_for(s2), np.asarray(r, float), term)


class TableQ:
    """Q given by a lookup table on the first state feature."""

    def __init__(self, table, gamma=0.99):
        self.table, self.gamma = np.asarray(table, float), gamma

    def q_values(self, states):
        return self.table[np.atleast_2d(states)[:, 0].astype(int)]


# -- encoding and greedy ---------------------------------------------------------

def test_encoding_appends_action_pair():
    s = np.arange(STATE_DIM, dtype=float)
    z = encode(s, (1, 2))
    assert z.shape == (1, STATE_DIM + 2)
    assert z[0, -2:].tolist() == [1.0, 2.0]


def test_all_actions_in_lexicographic_order():
    Z = encode_all_actions(np.zeros((2, STATE_DIM)))
    assert Z.shape == (16, STATE_DIM + 2)
    assert [tuple(r) for r in Z[:8, -2:].astype(int).tolist()] == list(ACTIONS)


def test_wrong_state_width_rejected():
    with pytest.raises(ValidationError):
        encode(np.zeros(5), (0, 0))


def test_tie_goes_to_lowest_index():
    assert greedy_action(ConstantQ(1.0), np.zeros(STATE_DIM)) == Action(0, 0)


def test_greedy_follows_largest_value():
    q = TableQ([[0, 1, 2, 3, 3, 1, 0, 0]])
    assert greedy_action(q, np.zeros(STATE_DIM)) == Action(0, 3)
    q = TableQ([[0, 0, 0, 0, 0, 0, 5, 0]])
    assert greedy_action(q, np.zeros(STATE_DIM)) == Action(1, 2)
    assert greedy_action(q, np.zeros((3, STATE_DIM))).tolist() == [[1, 2]] * 3


@settings(max_examples=50, deadline=None)
@given(vals=st.lists(st.integers(-5, 5), min_size=8, max_size=8), c=st.integers(-100, 100))
def test_greedy_is_shift_invariant(vals, c):
    base = TableQ([vals])
    shifted = TableQ([np.asarray(vals) + c])
    s = np.zeros((1, STATE_DIM))
    assert greedy_indices(base, s)[0] == greedy_indices(shifted, s)[0]
    assert vals[greedy_indices(base, s)[0]] == max(vals)
    assert greedy_indices(base, s)[0] == vals.index(max(vals))


# -- Bellman targets -------------------------------------------------------------

def test_first_targets_are_rewards():
    ts = tabular([0, 1], [0, 5], [1, 0], [0.5, -2.0])
    np.testing.assert_array_equal(bellman_targets(None, ts, 0.99), [0.5, -2.0])


def test_zero_discount_targets_are_rewards():
    ts = tabular([0, 1], [0, 5], [1, 0], [0.5, -2.0])
    np.testing.assert_array_equal(bellman_targets(ConstantQ(7.0), ts, 0.0), [0.5, -2.0])


@settings(max_examples=50, deadline=None)
@given(r=st.floats(-10, 10), c=st.floats(-10, 10), g=st.floats(0, 1))
def test_constant_q_target(r, c, g):
    ts = tabular([0], [3], [0], [r])
    assert bellman_targets(ConstantQ(c), ts, g)[0] == pytest.approx(r + g * c, abs=1e-12)


def test_terminal_targets_ignore_next_state():
    ts = tabular([0, 0], [0, 0], [0, 0], [1.0, 1.0], terminal=[True, False])
    np.testing.assert_allclose(bellman_targets(ConstantQ(4.0), ts, 0.5), [1.0, 3.0])


def test_empty_batch_rejected():
    ts = tabular([0], [0], [0], [1.0]).subset(np.array([], dtype=int))
    with pytest.raises(ValidationError):
        bellman_targets(None, ts)


# -- FQI ---------------------------------------------------------------------------

def _one_state(rewards, reps=3):
    a = np.repeat(np.arange(8), reps)
    return tabular(np.zeros_like(a), a, np.zeros_like(a), np.asarray(rewards)[a])


def test_single_iteration_learns_immediate_reward():
    r = np.array([0.0, 1.0, -1.0, 2.0, 0.5, 3.0, -2.0, 1.5])
    q, trace = fqi_train(_one_state(r), FqiConfig(K=1, fraction=1.0,
                                                  tree_params=TreeEnsembleParams(5, None, 1)))
    np.testing.assert_allclose(q.q_values(np.zeros((1, STATE_DIM)))[0], r, atol=1e-12)
    assert len(trace) == 1


def test_two_iterations_add_discounted_max():
    # Q1 = r; Q2 = r + 0.5 * max(r) = r + 1 with max(r) = 2.
    r = np.array([0.0, 1.0, 2.0, -1.0, 0.0, 0.5, 1.5, 2.0])
    q, _ = fqi_train(_one_state(r), FqiConfig(K=2, fraction=1.0, gamma=0.5,
                                              tree_params=TreeEnsembleParams(5, None, 1)))
    np.testing.assert_allclose(q.q_values(np.zeros((1, STATE_DIM)))[0], r + 1.0, atol=1e-12)


def test_fixed_point_of_single_state_chain():
    r = np.array([0.0, 1.0, 2.0, -1.0, 0.0, 0.5, 1.5, 2.0])
    g = 0.5
    q, trace = fqi_train(_one_state(r), FqiConfig(K=60, fraction=1.0, gamma=g,
                                                  tree_params=TreeEnsembleParams(3, None, 1)))
    np.testing.assert_allclose(q.q_values(np.zeros((1, STATE_DIM)))[0], r + g * 2.0 / (1 - g),
                               atol=1e-9)
    assert trace.deltas[-1] < 1e-9


def test_tabular_mdp_matches_value_iteration():
    rng = np.random.default_rng(0)
    S, m, g = 20, 10, 0.9
    R = rng.uniform(-1, 1, (S, 8))
    counts = np.array([[rng.multinomial(m, rng.dirichlet(np.ones(S))) for _ in range(8)]
                       for _ in range(S)])
    P = counts / m
    V = np.zeros(S)
    for _ in range(3000):
        Qstar = R + g * P @ V
        V = Qstar.max(axis=1)
    rows = np.array([(s, a, s2) for s in range(S) for a in range(8) for s2 in range(S)
                     for _ in range(counts[s, a, s2])])
    ts = tabular(rows[:, 0], rows[:, 1], rows[:, 2], R[rows[:, 0], rows[:, 1]])
    # Exhaustive data and one-sample leaves: each leaf averages over the empirical
    # next-state distribution, so FQI runs exact value iteration.
    q, _ = fqi_train(ts, FqiConfig(K=200, fraction=1.0, gamma=g,
                                   tree_params=TreeEnsembleParams(3, None, 1)))
    Q = q.q_values(states_for(np.arange(S)))
    assert np.max(np.abs(Q - Qstar)) <= 1e-3 * np.max(np.abs(Qstar))
    assert np.array_equal(Q.argmax(axis=1), Qstar.argmax(axis=1))


def test_subset_size_and_determinism():
    ts = _one_state(np.arange(8.0), reps=25)
    cfg = FqiConfig(K=4, fraction=0.1, tree_params=TreeEnsembleParams(3, None, 2), seed=3)
    q1, t1 = fqi_train(ts, cfg)
    q2, t2 = fqi_train(ts, cfg)
    assert t1.deltas == t2.deltas
    np.testing.assert_array_equal(q1.model.threshold, q2.model.threshold)
    assert q1.model.n_samples[q1.model.roots[0]] == 20


def test_epsilon_stops_early():
    ts = _one_state(np.arange(8.0))
    _, trace = fqi_train(ts, FqiConfig(K=500, fraction=1.0, gamma=0.5, epsilon=1e-6,
                                       tree_params=TreeEnsembleParams(2, None, 1)))
    assert len(trace) < 500
    assert trace.deltas[-1] <= 1e-6


def test_first_trace_entry_is_mean_abs_q1():
    r = np.array([1.0, -3.0, 2.0, 0.0, 0.0, 0.0, 4.0, -1.0])
    ts = _one_state(r, reps=1)
    _, trace = fqi_train(ts, FqiConfig(K=1, fraction=1.0, probe_fraction=1.0,
                                       tree_params=TreeEnsembleParams(1, None, 1)))
    assert trace.deltas[0] == pytest.approx(np.mean(np.abs(r)))


def test_network_fqi_runs_and_is_deterministic():
    ts = _one_state(np.linspace(-1, 1, 8), reps=10)
    cfg = FqiConfig(K=3, fraction=0.5, regressor="network",
                    network_params=NetworkParams(hidden=(8,), epochs_per_iteration=1))
    q1, t1 = fqi_train(ts, cfg)
    q2, t2 = fqi_train(ts, cfg)
    assert q1.kind == "network" and len(t1) == 3
    assert t1.deltas == t2.deltas


@pytest.mark.parametrize("kw", [dict(K=0), dict(fraction=0.0), dict(fraction=1.5),
                                dict(gamma=1.5), dict(regressor="svm"), dict(epsilon=-1.0)])
def test_invalid_fqi_config(kw):
    with pytest.raises(ConfigError):
        FqiConfig(**kw)


# -- Q-learning --------------------------------------------------------------------

def _episodes(n_eps, steps=5, r=1.0):
    parts = []
    for e in range(n_eps):
        parts.append(tabular(np.zeros(steps), np.zeros(steps), np.zeros(steps),
                             np.full(steps, r), terminal=np.ones(steps), aid=f"E{e}"))
    return TransitionSet(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                           ("admission_ids", "steps", "states", "actions", "next_states",
                            "rewards", "terminal")))


def test_zero_alpha_leaves_network_unchanged():
    ts = _episodes(3)
    model = mlp_init(STATE_DIM + 2, hidden=(4,), seed=1)
    q, trace = q_learning_train(ts, QLearningConfig(alpha=0.0), model=model)
    for a, b in zip(model.params, q.model.params):
        np.testing.assert_array_equal(a, b)
    assert trace.deltas == [0.0, 0.0, 0.0]


def test_trace_has_one_entry_per_episode():
    _, trace = q_learning_train(_episodes(7), QLearningConfig(alpha=1e-3,
                                network_params=NetworkParams(hidden=(4,))))
    assert len(trace) == 7 and trace.index_name == "episode"


def test_terminal_td_moves_monotonically_toward_reward():
    # A linear model on one constant input: every update nudges Q(s, a) toward r = 1.
    ts = _episodes(20, steps=5)
    model = mlp_init(STATE_DIM + 2, hidden=(), seed=0, l2=0.0)
    for W in model.weights:
        W[:] = 0.0
    q = QFunction("network", model, 0.99)
    z = encode(np.zeros(STATE_DIM), (0, 0))
    values = [q.predict_encoded(z)[0]]
    for e in range(20):
        part = ts.subset(np.flatnonzero(ts.admission_ids == f"E{e}"))
        q, _ = q_learning_train(part, QLearningConfig(alpha=5e-3), model=q.model)
        values.append(q.predict_encoded(z)[0])
    assert values[0] == 0.0
    assert np.all(np.diff(values) > 0)
    assert values[-1] <= 1.0 + 1e-9


def test_learning_rate_out_of_range():
    with pytest.raises(ConfigError):
        QLearningConfig(alpha=-0.1)


# -- traces ------------------------------------------------------------------------

def test_first_below():
    t = ConvergenceTrace("x", deltas=[1.0, 0.5, 0.06, 0.04])
    assert t.first_below(0.05) == 4
    assert t.first_below(0.01) is None
    assert ConvergenceTrace("y").first_below(0.05) is None


def test_trace_round_trip(tmp_path):
    t = ConvergenceTrace("x", deltas=[0.1, 1 / 3, 2e-17])
    write_trace(t, tmp_path / "trace.csv")
    assert read_trace(tmp_path / "trace.csv").tolist() == t.deltas
    assert (tmp_path / "trace.csv").read_text().splitlines()[0] == "iteration,mean_abs_delta_q"
