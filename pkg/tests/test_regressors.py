import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ventwean.errors import ConfigError, DivergenceError, ValidationError
from ventwean.regressors import (
    CLASSIFICATION, TreeEnsembleParams, adam_step, et_classify, et_fit, et_predict,
    gini_importance, mlp_fit_epoch, mlp_init, mlp_loss_and_grad, mlp_mse, mlp_predict,
)


def walk(ens, t, X):
    """Route rows of X through tree t; returns, per node, the indices reaching it."""
    reach = {int(ens.roots[t]): np.arange(len(X))}
    out = {}
    while reach:
        node, rows = reach.popitem()
        out[node] = rows
        f = ens.feature[node]
        if f >= 0:
            go_left = X[rows, f] < ens.threshold[node]
            reach[int(ens.left[node])] = rows[go_left]
            reach[int(ens.right[node])] = rows[~go_left]
    return out


# -- Extra-Trees -----------------------------------------------------------------

def test_constant_target_predicted_everywhere():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 4))
    ens = et_fit(X, np.full(200, 3.25), TreeEnsembleParams(n_trees=5, min_leaf=2))
    assert np.all(et_predict(ens, rng.normal(size=(50, 4))) == 3.25)


def test_too_few_samples_give_single_leaves():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(39, 3)), rng.normal(size=39)
    ens = et_fit(X, y, TreeEnsembleParams(n_trees=4, min_leaf=20))
    assert ens.n_nodes == 4
    np.testing.assert_allclose(et_predict(ens, X), y.mean(), rtol=0, atol=1e-12)


def test_same_seed_same_forest():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(300, 5)), rng.normal(size=300)
    p = TreeEnsembleParams(n_trees=6, min_leaf=3, seed=9)
    a, b = et_fit(X, y, p), et_fit(X, y, p)
    np.testing.assert_array_equal(a.threshold, b.threshold)
    np.testing.assert_array_equal(a.feature, b.feature)
    c = et_fit(X, y, TreeEnsembleParams(n_trees=6, min_leaf=3, seed=10))
    assert not np.array_equal(a.threshold, c.threshold)


def test_single_leaf_predicts_leaf_mean():
    X = np.arange(10.0)[:, None]
    y = np.arange(10.0)
    ens = et_fit(X, y, TreeEnsembleParams(n_trees=1, min_leaf=10))
    assert et_predict(ens, [123.0]) == 4.5


def test_stump_on_separable_data():
    # Ten points, min_leaf 5: the only admissible split is between 4 and 10.
    X = np.array([0, 1, 2, 3, 4, 10, 11, 12, 13, 14], float)[:, None]
    y = np.array([0] * 5 + [1] * 5)
    ens = et_fit(X, y, TreeEnsembleParams(n_trees=1, min_leaf=5, task=CLASSIFICATION))
    assert ens.n_nodes == 3
    assert 4.0 < ens.threshold[0] <= 10.0
    assert et_classify(ens, [[2.0], [12.0], [-50.0], [50.0]]).tolist() == [0, 1, 0, 1]


def test_class_probabilities_sum_to_one():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(400, 6))
    y = rng.integers(0, 5, 400)
    ens = et_fit(X, y, TreeEnsembleParams(n_trees=10, min_leaf=3, task=CLASSIFICATION))
    P = et_predict(ens, rng.normal(size=(100, 6)))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_class_scaling_does_not_change_argmax():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 3))
    y = (X[:, 0] > 0).astype(int) + (X[:, 1] > 0)
    ens = et_fit(X, y, TreeEnsembleParams(n_trees=5, min_leaf=4, task=CLASSIFICATION))
    probe = rng.normal(size=(80, 3))
    P = et_predict(ens, probe)
    assert np.array_equal(np.argmax(P, 1), np.argmax(7.5 * P, 1))


def test_importance_of_single_leaf_is_zero():
    ens = et_fit(np.zeros((5, 3)), np.array([0, 1, 0, 1, 0]),
                 TreeEnsembleParams(n_trees=3, min_leaf=1, task=CLASSIFICATION))
    assert not gini_importance(ens).any()


def test_importance_finds_the_label_feature():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(1000, 6))
    y = (X[:, 3] > 0.2).astype(int)
    ens = et_fit(X, y, TreeEnsembleParams(n_trees=50, min_leaf=1, task=CLASSIFICATION))
    imp = gini_importance(ens)
    assert imp.sum() == pytest.approx(1.0, abs=1e-12)
    assert imp[3] > 0.8
    assert np.all(imp >= 0)


def test_training_error_shrinks_with_more_trees():
    rng = np.random.default_rng(6)
    X = rng.uniform(-2, 2, size=(300, 2))
    y = np.sin(2 * X[:, 0]) + 0.3 * X[:, 1] + 0.1 * rng.normal(size=300)
    mse = {n: np.mean([np.mean((et_predict(et_fit(X, y, TreeEnsembleParams(n, None, 10, s)), X) - y) ** 2)
                       for s in range(20)]) for n in (1, 5, 25)}
    assert mse[1] >= mse[5] >= mse[25]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), min_leaf=st.integers(1, 15), n=st.integers(1, 300),
       task=st.sampled_from(["regression", CLASSIFICATION]))
def test_leaves_and_thresholds_respect_structure(seed, min_leaf, n, task):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(n, 4)), 1)           # ties on purpose
    y = rng.integers(0, 3, n) if task == CLASSIFICATION else rng.normal(size=n)
    ens = et_fit(X, y, TreeEnsembleParams(3, None, min_leaf, seed, task))
    for t in range(ens.n_trees):
        for node, rows in walk(ens, t, X).items():
            assert len(rows) == ens.n_samples[node]
            f = ens.feature[node]
            if f < 0:
                assert len(rows) >= min_leaf or node == ens.roots[t]
            else:
                col = X[rows, f]
                assert col.min() < ens.threshold[node] <= col.max()


def test_bad_inputs_rejected():
    with pytest.raises(ValidationError):
        et_fit(np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(ValidationError):
        et_fit(np.zeros((4, 0)), np.zeros(4))
    ens = et_fit(np.zeros((4, 2)), np.zeros(4), TreeEnsembleParams(1, None, 1))
    with pytest.raises(ValidationError):
        et_predict(ens, np.zeros((1, 3)))
    with pytest.raises(ConfigError):
        TreeEnsembleParams(min_leaf=0)


# -- MLP ---------------------------------------------------------------------------

def test_zero_network_outputs_zero():
    m = mlp_init(3, hidden=(4, 4))
    m.weights = [np.zeros_like(W) for W in m.weights]
    assert np.all(mlp_predict(m, np.ones((5, 3))) == 0.0)


def test_golden_two_two_one_forward():
    m = mlp_init(2, hidden=(2,))
    m.weights = [np.array([[1.0, -1.0], [2.0, 0.5]]), np.array([[3.0], [-2.0]])]
    m.biases = [np.array([0.5, -1.0]), np.array([0.25])]
    # h = relu([1*1 + 2*2 + 0.5, -1*1 + 0.5*2 - 1]) = [5.5, 0]; out = 3*5.5 + 0.25
    assert mlp_predict(m, [1.0, 2.0]) == 16.75


def test_doubling_final_layer_doubles_output():
    rng = np.random.default_rng(7)
    m = mlp_init(3, hidden=(5, 4), seed=1)
    m.biases[-1][:] = 0.0
    X = rng.normal(size=(10, 3))
    y1 = mlp_predict(m, X)
    m.weights[-1] *= 2
    np.testing.assert_allclose(mlp_predict(m, X), 2 * y1, rtol=1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    h = 1e-5
    for trial in range(20):
        hidden = tuple(int(x) for x in rng.integers(1, 6, size=2))
        d = int(rng.integers(1, 5))
        m = mlp_init(d, hidden=hidden, seed=trial, l2=0.01)
        for p in m.params:
            p += 0.1 * rng.normal(size=p.shape)  # non-zero biases, generic kinks
        X, y = rng.normal(size=(7, d)), rng.normal(size=7)
        _, grads = mlp_loss_and_grad(m, X, y)
        for p, g in zip(m.params, grads):
            num = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                old = p[i]
                p[i] = old + h
                fp = mlp_loss_and_grad(m, X, y)[0]
                p[i] = old - h
                fm = mlp_loss_and_grad(m, X, y)[0]
                p[i] = old
                num[i] = (fp - fm) / (2 * h)
            err = np.linalg.norm(num - g) / max(np.linalg.norm(num) + np.linalg.norm(g), 1e-12)
            assert err < 1e-5


def test_zero_learning_rate_keeps_weights():
    rng = np.random.default_rng(9)
    m = mlp_init(2, hidden=(3, 3), lr=0.0)
    before = [p.copy() for p in m.params]
    mlp_fit_epoch(m, rng.normal(size=(30, 2)), rng.normal(size=30), batch_size=8)
    for a, b in zip(before, m.params):
        np.testing.assert_array_equal(a, b)


def test_first_adam_step_moves_by_learning_rate():
    m = mlp_init(1, hidden=(), lr=0.01, l2=0.0)
    m.weights[0][:] = 0.5
    m.biases[0][:] = 0.0
    # loss = (0.5*x - t)^2 with x = 1, t = 0: dL/dw = 2 * 0.5 = 1.
    _, grads = mlp_loss_and_grad(m, np.array([[1.0]]), np.array([0.0]))
    assert grads[0][0, 0] == pytest.approx(1.0)
    adam_step(m, grads)
    assert m.weights[0][0, 0] - 0.5 == pytest.approx(-0.01, abs=1e-6)


def test_fits_a_line():
    rng = np.random.default_rng(10)
    x = rng.uniform(-1, 1, size=(100, 1))
    y = 2 * x[:, 0]
    m = mlp_init(1, hidden=(16, 16), seed=3, lr=1e-2, l2=0.0)
    start = mlp_mse(m, x, y)
    for _ in range(200):
        m, mse = mlp_fit_epoch(m, x, y, batch_size=16)
    assert mse < 1e-2 * start


def test_epochs_are_deterministic():
    rng = np.random.default_rng(11)
    X, y = rng.normal(size=(50, 3)), rng.normal(size=50)
    a = mlp_init(3, hidden=(4, 4), seed=2)
    b = mlp_init(3, hidden=(4, 4), seed=2)
    for _ in range(3):
        _, ea = mlp_fit_epoch(a, X, y)
        _, eb = mlp_fit_epoch(b, X, y)
    assert ea == eb


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported():
    m = mlp_init(1, hidden=(4,), lr=1e300, l2=0.0)
    with pytest.raises(DivergenceError):
        for _ in range(5):
            mlp_fit_epoch(m, np.array([[1e200], [2e200]]), np.array([1e300, -1e300]), batch_size=1)


def test_dimension_mismatch():
    m = mlp_init(3, hidden=(2,))
    with pytest.raises(ValidationError):
        mlp_predict(m, np.zeros(4))
