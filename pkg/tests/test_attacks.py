import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradshield import attacks as A
from gradshield import autodiff as ad
from gradshield import data as D
from gradshield import models as M


def linear_model(W, b):
    d, k = W.shape
    spec = M.ModelSpec((M.Dense(k),), (d,), k, "linear")
    return spec, M.Params({"dense0.W": np.asarray(W, float), "dense0.b": np.asarray(b, float)}, 0)


def xent(W, b, X, y):
    z = X @ W + b
    z = z - z.max(axis=1, keepdims=True)
    return -np.sum(y * (z - np.log(np.exp(z).sum(axis=1, keepdims=True))), axis=1)


def test_fgsm_is_worst_case_on_binary_linear_models():
    rng = np.random.default_rng(0)
    eps = 0.1
    offsets = np.linspace(-eps, eps, 11)
    for _ in range(20):
        W, b = rng.normal(size=(2, 2)) * 3, rng.normal(size=2)
        X = rng.uniform(0.2, 0.8, size=(5, 2))
        y = D.one_hot(rng.integers(0, 2, 5), 2)
        spec, params = linear_model(W, b)
        adv = A.fgsm(spec, params, X, y, eps).X_adv
        best = xent(W, b, adv, y)
        for dx, dy in itertools.product(offsets, offsets):
            assert np.all(best >= xent(W, b, X + [dx, dy], y) - 1e-12)


def test_input_gradient_matches_closed_form(rng):
    W, b = rng.normal(size=(3, 4)), rng.normal(size=4)
    spec, params = linear_model(W, b)
    X = rng.uniform(size=(6, 3))
    y = D.one_hot(rng.integers(0, 4, 6), 4)
    p = M.predict_probs(X @ W + b)
    np.testing.assert_allclose(A.loss_input_gradient(spec, params, X, y, batch_size=4), (p - y) @ W.T, rtol=1e-12, atol=1e-15)


def test_fgsm_tgsm_directions_and_sign_zero(rng):
    W = np.array([[1.0, -1.0], [0.0, 0.0]])  # second pixel has zero gradient
    spec, params = linear_model(W, np.array([-0.4, 0.4]))  # boundary at x0 = 0.4
    X = np.array([[0.5, 0.5]])
    y = np.array([[1.0, 0.0]])
    adv = A.fgsm(spec, params, X, y, 0.2)
    np.testing.assert_allclose(adv.X_adv, [[0.3, 0.5]])
    tgt = A.tgsm(spec, params, X, np.array([[0.0, 1.0]]), 0.2)
    np.testing.assert_allclose(tgt.X_adv, [[0.3, 0.5]])
    assert adv.success[0] and tgt.success[0]
    assert adv.linf[0] == pytest.approx(0.2) and adv.l0[0] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.integers(1, 4))
def test_attacks_stay_in_box_and_budget(seed, eps, steps):
    rng = np.random.default_rng(seed)
    spec, params = linear_model(rng.normal(size=(5, 3)), rng.normal(size=3))
    X = rng.uniform(size=(4, 5))
    y = D.one_hot(rng.integers(0, 3, 4), 3)
    for res in (A.fgsm(spec, params, X, y, eps), A.iterate(A.tgsm, spec, params, X, y, steps, eps)):
        assert res.X_adv.min() >= 0 and res.X_adv.max() <= 1
        assert np.all(np.abs(res.X_adv - X).max(axis=1) <= res.iterations * eps + 1e-12)
        np.testing.assert_allclose(res.linf, np.abs(res.X_adv - X).max(axis=1))


def test_zero_eps_is_identity(rng):
    spec, params = linear_model(rng.normal(size=(5, 3)), np.zeros(3))
    X = rng.uniform(size=(4, 5))
    y = D.one_hot([0, 1, 2, 0], 3)
    np.testing.assert_array_equal(A.fgsm(spec, params, X, y, 0.0).X_adv, X)


def test_iterated_single_step_equals_single_attack(rng):
    spec, params = linear_model(rng.normal(size=(5, 3)), np.zeros(3))
    X = rng.uniform(size=(4, 5))
    y = D.one_hot([0, 1, 2, 0], 3)
    one = A.iterate(A.fgsm, spec, params, X, y, 1, 0.1)
    np.testing.assert_array_equal(one.X_adv, A.fgsm(spec, params, X, y, 0.1).X_adv)
    assert one.kind == "ifgsm"
    three = A.iterate(A.fgsm, spec, params, X, y, 3, 0.1)
    manual = X
    for _ in range(3):
        manual = A.fgsm(spec, params, manual, y, 0.1).X_adv
    np.testing.assert_array_equal(three.X_adv, manual)
    with pytest.raises(ValueError):
        A.iterate(A.fgsm, spec, params, X, y, 0, 0.1)


def test_attack_argument_errors(rng):
    spec, params = linear_model(rng.normal(size=(5, 3)), np.zeros(3))
    X = rng.uniform(size=(2, 5))
    with pytest.raises(ValueError):
        A.fgsm(spec, params, X, D.one_hot([0, 1], 3), -0.1)
    with pytest.raises(ad.ShapeError):
        A.fgsm(spec, params, X, D.one_hot([0, 1, 2], 3), 0.1)
    with pytest.raises(ad.ShapeError):
        A.tgsm(spec, params, X, D.one_hot([0, 1], 4), 0.1)


def test_y_plus_1():
    y = D.one_hot(np.arange(10), 10)
    np.testing.assert_array_equal(A.y_plus_1(y).argmax(axis=1), (np.arange(10) + 1) % 10)
    with pytest.raises(ValueError):
        A.y_plus_1(D.one_hot([0, 1], 3))
    np.testing.assert_array_equal(A.fixed_target(3, 2, 4).argmax(axis=1), [2, 2, 2])


# --- JSMA ------------------------------------------------------------------------


def _prob_jacobian(W, b, x):
    p = M.predict_probs(x @ W + b)
    return (np.diag(p) - np.outer(p, p)) @ W.T


def _exhaustive_pair(J, target, domain):
    best, best_score = None, -np.inf
    for p, q in itertools.combinations(range(J.shape[1]), 2):
        if not (domain[p] and domain[q]):
            continue
        alpha = J[target, p] + J[target, q]
        beta = sum(J[j, p] + J[j, q] for j in range(J.shape[0]) if j != target)
        if alpha > 0 and beta < 0 and -alpha * beta > best_score:
            best, best_score = (p, q), -alpha * beta
    return best


def test_pair_selection_equals_exhaustive_search():
    rng = np.random.default_rng(42)
    agree = 0
    for _ in range(100):
        W, b = rng.normal(size=(4, 3)), rng.normal(size=3)
        spec, params = linear_model(W, b)
        x = rng.uniform(size=4)
        target = int(rng.integers(0, 3))
        J = A.class_jacobian(spec, params, x)
        np.testing.assert_allclose(J, _prob_jacobian(W, b, x), rtol=1e-10, atol=1e-14)
        domain = np.ones(4, bool)
        assert A.select_pair(J, target, domain) == _exhaustive_pair(_prob_jacobian(W, b, x), target, domain)
        agree += 1
    assert agree == 100


def test_logit_jacobian_is_weights(rng):
    W, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    spec, params = linear_model(W, b)
    np.testing.assert_allclose(A.class_jacobian(spec, params, rng.uniform(size=4), use_logits=True), W.T, rtol=1e-12)


def test_select_pair_respects_domain_and_reports_none():
    J = np.array([[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0]])
    assert A.select_pair(J, 0, np.array([True, False, True])) == (0, 2)
    assert A.select_pair(J, 0, np.array([True, False, False])) is None
    assert A.select_pair(-J, 0, np.ones(3, bool)) is None


def test_jsma_reaches_target_within_budget():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(16, 3))
    W[:, 2] = np.abs(W[:, 2]) + 0.5  # class 2 likes bright pixels
    spec, params = linear_model(W, np.array([2.0, 2.0, -1.0]))
    x = np.full(16, 0.1)
    res = A.jsma(spec, params, x, np.eye(3)[2], gamma=0.5)
    assert res.success[0]
    assert res.l0[0] <= 0.5 * 16 and res.l0[0] == 2 * res.iterations
    changed = res.X_adv[0] != x
    assert np.all(res.X_adv[0][changed] == 1.0)


def test_jsma_stops_at_budget():
    # target class can never win: all pixels push away from it
    W = np.zeros((8, 2))
    W[:, 0] = 1.0
    W[:, 1] = -1.0
    spec, params = linear_model(W, np.zeros(2))
    res = A.jsma(spec, params, np.full(8, 0.2), np.eye(2)[1], gamma=0.25)
    assert not res.success[0] and res.l0[0] <= 2


def test_jsma_already_at_target_is_unchanged(rng):
    spec, params = linear_model(rng.normal(size=(4, 2)), np.array([5.0, -5.0]))
    x = rng.uniform(size=4)
    res = A.jsma(spec, params, x, np.eye(2)[0])
    assert res.success[0] and res.iterations == 0
    np.testing.assert_array_equal(res.X_adv[0], x)


def test_jsma_validation(rng):
    spec, params = linear_model(rng.normal(size=(4, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        A.jsma(spec, params, np.zeros(4), np.eye(2)[0], gamma=0.0)
    with pytest.raises(ad.ShapeError):
        A.jsma(spec, params, np.zeros(5), np.eye(2)[0])


def test_batch_round_trip(tmp_path, rng):
    spec, params = linear_model(rng.normal(size=(5, 3)), np.zeros(3))
    X = rng.uniform(size=(4, 5))
    y = D.one_hot([0, 1, 2, 0], 3)
    res = A.tgsm(spec, params, X, A.fixed_target(4, 1, 3), 0.1)
    digest = A.save_batch(tmp_path / "b.gsh", res, y, "abc", {"eps": 0.1})
    tensors, meta = A.load_batch(tmp_path / "b.gsh")
    np.testing.assert_array_equal(tensors["X_adv"], res.X_adv)
    assert meta["generator_checkpoint_sha256"] == "abc" and meta["attack"] == "tgsm"
    assert len(digest) == 64
