import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vocalscreen.shallow import (
    KNNSpec,
    LRModel,
    LRSpec,
    MLPSpec,
    Scaler,
    SVMSpec,
    exact_neighbours,
    load_shallow,
    predict_proba,
    save_shallow,
    train_shallow,
)


def _separable(n=60, seed=0, d=2):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    X[y == 1, 0] += 0.5
    X[y == 0, 0] -= 0.5
    return X, y


def _xor(reps=10, seed=0):
    rng = np.random.default_rng(seed)
    base = np.array([[1, 1], [-1, -1], [1, -1], [-1, 1]], float)
    X = np.repeat(base, reps, axis=0) + 0.1 * rng.normal(size=(4 * reps, 2))
    y = np.repeat([1, 1, 0, 0], reps)
    return X, y


def test_knn_self_neighbour():
    X, y = _separable()
    m = train_shallow(KNNSpec(alpha5=1, alpha6=5, allow_off_grid=True), X, y)
    np.testing.assert_array_equal(m.predict_proba(X), y)


def test_knn_symmetric_midpoint():
    m = train_shallow(KNNSpec(alpha5=2, alpha6=5, allow_off_grid=True),
                      [[0.0, 0.0], [2.0, 0.0]], [0, 1])
    assert predict_proba(m, [1.0, 0.0]) == 0.5


def test_knn_tree_equals_exact_search():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 4))
    y = (rng.random(300) < 0.5).astype(int)
    tree = train_shallow(KNNSpec(alpha5=10, alpha6=5), X, y)
    exact = train_shallow(KNNSpec(alpha5=10, alpha6=5, exact=True), X, y)
    Q = tree.scaler(rng.normal(size=(1000, 4)))
    a, b = tree.neighbours(Q), exact.neighbours(Q)
    assert all(set(r) == set(s) for r, s in zip(a, b))
    np.testing.assert_array_equal(tree.predict_proba(Q), exact.predict_proba(Q))


def test_exact_neighbours_brute_force():
    rng = np.random.default_rng(2)
    T, Q = rng.normal(size=(15, 3)), rng.normal(size=(4, 3))
    got = exact_neighbours(T, Q, 3)
    for q, row in zip(Q, got):
        d = [np.linalg.norm(q - t) for t in T]
        assert sorted(row.tolist()) == sorted(np.argsort(d)[:3].tolist())


def test_lr_separable_weak_regularisation():
    X, y = _separable()
    m = train_shallow(LRSpec(alpha1=1e7, alpha2=0.0, alpha3=1.0), X, y)
    assert np.mean((m.predict_proba(X) >= 0.5) == y) == 1.0


def test_lr_zero_weights_gives_half():
    m = LRModel(LRSpec(), Scaler(np.zeros(3), np.ones(3)), 3, np.zeros(3), 0.0)
    assert predict_proba(m, [4.0, -2.0, 9.0]) == 0.5


def _newton_l2_lr(Z, y, lam):
    """Independent oracle: Newton's method on mean logloss + lam/2 |w|^2."""
    n, d = Z.shape
    Za = np.hstack([Z, np.ones((n, 1))])
    reg = np.diag([lam] * d + [0.0])
    theta = np.zeros(d + 1)
    for _ in range(100):
        p = 1 / (1 + np.exp(-Za @ theta))
        g = Za.T @ (p - y) / n + reg @ theta
        H = (Za * (p * (1 - p))[:, None]).T @ Za / n + reg
        theta -= np.linalg.solve(H, g)
        if np.max(np.abs(g)) < 1e-14:
            break
    return theta


@pytest.mark.parametrize("alpha1,alpha3", [(1.0, 1.0), (0.1, 0.5), (100.0, 0.25)])
def test_lr_pure_l2_matches_newton_oracle(alpha1, alpha3):
    rng = np.random.default_rng(3)
    X = rng.normal(size=(80, 3))
    y = (X @ [1.0, -2.0, 0.5] + rng.normal(size=80) > 0).astype(int)
    m = train_shallow(LRSpec(alpha1=alpha1, alpha2=0.0, alpha3=alpha3), X, y)
    theta = _newton_l2_lr(m.scaler(X), y, alpha3 / (alpha1 * len(X)))
    np.testing.assert_allclose(m.w, theta[:3], atol=1e-5)
    assert m.b == pytest.approx(theta[3], abs=1e-5)


def test_lr_l1_produces_sparsity():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(100, 6))
    y = (X[:, 0] > 0).astype(int)
    m = train_shallow(LRSpec(alpha1=0.1, alpha2=1.0, alpha3=0.0), X, y)
    assert np.sum(m.w == 0) >= 3 and m.w[0] > 0


def _best_linear_accuracy(X, y):
    """Brute-force sweep of linear decision surfaces."""
    best = 0.0
    for ang in np.linspace(0, 2 * np.pi, 180, endpoint=False):
        s = X @ [np.cos(ang), np.sin(ang)]
        for b in np.linspace(s.min() - 1, s.max() + 1, 200):
            best = max(best, np.mean((s > b) == y))
    return best


def test_svm_rbf_solves_xor_linear_cannot():
    X, y = _xor()
    m = train_shallow(SVMSpec(alpha1=10.0, alpha4=1.0), X, y)
    assert np.mean((m.decision_function(X) > 0) == y) == 1.0
    assert np.mean((m.predict_proba(X) >= 0.5) == y) == 1.0
    assert _best_linear_accuracy(X, y) < 0.8


def test_svm_duplicate_support_vectors_keep_decision_sign():
    X, y = _separable(40, seed=5)
    spec = SVMSpec(alpha1=1e3, alpha4=0.1)
    m = train_shallow(spec, X, y)
    Z = m.scaler(X)
    sv = [i for i in range(len(X)) if np.any(np.all(np.isclose(m.support, Z[i]), axis=1))]
    pos = [i for i in sv if y[i] == 1][:2]
    neg = [i for i in sv if y[i] == 0][:2]
    X2 = np.vstack([X, X[pos], X[neg]])
    y2 = np.concatenate([y, y[pos], y[neg]])
    m2 = train_shallow(spec, X2, y2)
    Q = np.random.default_rng(6).normal(size=(500, 2)) * 2
    # compare in the original input space; only inputs far from the boundary count
    f1, f2 = m.decision_function(Q), m2.decision_function(Q)
    keep = np.abs(f1) > 0.05
    np.testing.assert_array_equal(np.sign(f1[keep]), np.sign(f2[keep]))


def test_mlp_deterministic():
    X, y = _xor(5)
    spec = MLPSpec(alpha7=20, alpha3=0.0, beta6=1e-2, epochs=50, seed=3)
    a = train_shallow(spec, X, y).predict_proba(X)
    b = train_shallow(spec, X, y).predict_proba(X)
    np.testing.assert_array_equal(a, b)


def test_mlp_learns_xor():
    X, y = _xor(10)
    m = train_shallow(MLPSpec(alpha7=20, beta6=1e-2, epochs=200), X, y)
    assert np.mean((m.predict_proba(X) >= 0.5) == y) == 1.0


SPECS = [LRSpec(), SVMSpec(alpha1=1.0, alpha4=0.1), KNNSpec(alpha5=10, alpha6=5),
         MLPSpec(alpha7=10, epochs=20)]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.variant)
def test_probabilities_in_range_and_round_trip(spec, tmp_path):
    X, y = _separable(50, seed=7)
    m = train_shallow(spec, X, y)
    p = m.predict_proba(X)
    assert np.all((p >= 0) & (p <= 1)) and np.isfinite(p).all()
    np.testing.assert_array_equal(p, m.predict_proba(X))
    save_shallow(m, tmp_path / "m.vsnn")
    np.testing.assert_array_equal(load_shallow(tmp_path / "m.vsnn").predict_proba(X), p)
    with pytest.raises(ValueError, match="features"):
        m.predict_proba(np.zeros((1, 5)))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.variant)
def test_single_class_rejected(spec):
    with pytest.raises(ValueError, match="both classes"):
        train_shallow(spec, np.zeros((4, 2)), [1, 1, 1, 1])


def test_grid_enforced_unless_overridden():
    with pytest.raises(ValueError, match="grid"):
        SVMSpec(alpha1=3.0)
    with pytest.raises(ValueError, match="grid"):
        KNNSpec(alpha5=7)
    with pytest.raises(ValueError, match="grid"):
        MLPSpec(beta6=0.5)
    assert SVMSpec(alpha1=3.0, allow_off_grid=True).alpha1 == 3.0
    for a1, a4 in itertools.product([1e-7, 1.0, 1e7], [1e-7, 1e7]):
        SVMSpec(alpha1=a1, alpha4=a4)


@given(st.integers(0, 10 ** 6))
def test_knn_vote_fraction_property(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 2))
    y = np.r_[np.zeros(12, int), np.ones(13, int)]
    m = train_shallow(KNNSpec(alpha5=5, alpha6=5, allow_off_grid=True), X, y)
    q = rng.normal(size=(3, 2))
    idx = exact_neighbours(m.Z, m.scaler(q), 5)
    np.testing.assert_allclose(m.predict_proba(q), y[idx].mean(1))
