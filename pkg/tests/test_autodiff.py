import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradshield import autodiff as ad
from gradshield.gradcheck import check_gradient, relative_error, second_order_check

TOL = 1e-6


def _away_from(rng, shape, kinks=(0.0,), gap=0.05, lo=-2.0, hi=2.0):
    """Random values at least ``gap`` away from every kink, so h=1e-5 never crosses one."""
    x = rng.uniform(lo, hi, size=shape)
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] = k + np.where(x[near] >= k, gap, -gap) * 2
    return x


def _weighted(node, rng):
    w = node.tape.constant(rng.normal(size=node.shape))
    return ad.sum(ad.mul(node, w))


UNARY = {
    "neg": (ad.neg, lambda r, s: r.normal(size=s)),
    "exp": (ad.exp, lambda r, s: r.normal(size=s)),
    "log": (ad.log, lambda r, s: r.uniform(0.2, 3.0, size=s)),
    "sigmoid": (ad.sigmoid, lambda r, s: r.normal(scale=3, size=s)),
    "softplus": (ad.softplus, lambda r, s: r.normal(scale=3, size=s)),
    "relu": (ad.relu, lambda r, s: _away_from(r, s)),
    "clamp_min": (lambda a: ad.clamp_min(a, 0.3), lambda r, s: _away_from(r, s, (0.3,))),
    "transpose": (ad.transpose, lambda r, s: r.normal(size=s)),
    "reshape": (lambda a: ad.reshape(a, (-1,)), lambda r, s: r.normal(size=s)),
    "sum_axis0": (lambda a: ad.sum(a, axis=0), lambda r, s: r.normal(size=s)),
    "sum_axis1": (lambda a: ad.sum(a, axis=1), lambda r, s: r.normal(size=s)),
    "log_softmax": (ad.log_softmax, lambda r, s: r.normal(scale=2, size=s)),
    "gather": (lambda a: ad.gather(a, np.array([[0, 3], [-1, 5], [2, 2]])), lambda r, s: r.normal(size=s)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, rng):
    fn, sample = UNARY[name]
    tape = ad.Tape()
    x = tape.variable("x", sample(rng, (3, 4)))
    loss = _weighted(fn(x), rng)
    assert check_gradient(loss, [x]) < TOL


BINARY = {
    "add": (ad.add, (3, 4), (3, 4)),
    "sub": (ad.sub, (3, 4), (3, 4)),
    "mul": (ad.mul, (3, 4), (3, 4)),
    "div": (ad.div, (3, 4), (3, 4)),
    "mul_scalar": (ad.mul, (3, 4), ()),
    "div_scalar_num": (ad.div, (), (3, 4)),
    "matmul": (ad.matmul, (3, 4), (4, 2)),
    "bias_add": (ad.bias_add, (3, 4), (4,)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name, rng):
    fn, sa, sb = BINARY[name]
    tape = ad.Tape()
    a = tape.variable("a", rng.normal(size=sa))
    b = tape.variable("b", rng.uniform(0.5, 2.0, size=sb) * rng.choice([-1, 1], size=sb))
    loss = _weighted(fn(a, b), rng)
    assert check_gradient(loss, [a, b]) < TOL


def test_broadcast_and_fill_gradients(rng):
    tape = ad.Tape()
    v = tape.variable("v", rng.normal(size=(3,)))
    s = tape.variable("s", np.array(0.7))
    out = ad.add(ad.broadcast_axis(v, 1, 4), ad.fill(s, (3, 4)))
    assert check_gradient(_weighted(out, rng), [v, s]) < TOL


def test_scatter_add_gradient(rng):
    tape = ad.Tape()
    g = tape.variable("g", rng.normal(size=(3, 2)))
    out = ad.scatter_add(g, np.array([[0, 3], [-1, 5], [3, 0]]), (2, 3))
    assert out.shape == (2, 3)
    assert check_gradient(_weighted(out, rng), [g]) < TOL


@pytest.mark.parametrize("padding", ["valid", "same"])
def test_patches_gradient(padding, rng):
    tape = ad.Tape()
    x = tape.variable("x", rng.normal(size=(2, 5, 4, 3)))
    assert check_gradient(_weighted(ad.patches(x, 3, padding), rng), [x]) < TOL


def test_maxpool_gradient(rng):
    tape = ad.Tape()
    # distinct values spaced by 0.01 so no perturbation changes the argmax
    vals = rng.permutation(2 * 4 * 6 * 2).reshape(2, 4, 6, 2) * 0.01
    x = tape.variable("x", vals)
    assert check_gradient(_weighted(ad.maxpool(x), rng), [x]) < TOL


def test_conv_as_patches_matches_direct_convolution(rng):
    x = rng.normal(size=(2, 6, 5, 3))
    W = rng.normal(size=(3, 3, 3, 4))
    tape = ad.Tape()
    cols = ad.patches(tape.constant(x), 3, "valid")
    out = (cols @ tape.constant(W.reshape(-1, 4))).value.reshape(2, 4, 3, 4)
    direct = np.zeros((2, 4, 3, 4))
    for i in range(4):
        for j in range(3):
            direct[:, i, j, :] = np.einsum("nabc,abcf->nf", x[:, i : i + 3, j : j + 3, :], W)
    np.testing.assert_allclose(out, direct, rtol=1e-12, atol=1e-12)


def test_maxpool_forward_and_tie_routing():
    x = np.array([[1.0, 3.0], [3.0, 2.0]]).reshape(1, 2, 2, 1)
    tape = ad.Tape()
    v = tape.variable("x", x)
    out = ad.maxpool(v)
    assert out.value.reshape(()) == 3.0
    (g,) = tape.gradient(ad.sum(out), [v])
    # first maximal element in row-major window order takes the whole gradient
    np.testing.assert_array_equal(g.value.reshape(2, 2), [[0, 1], [0, 0]])


def test_composed_mlp_gradient(rng):
    tape = ad.Tape()
    x = tape.variable("x", rng.normal(size=(4, 5)))
    W1 = tape.variable("W1", rng.normal(size=(5, 6)) * 0.5)
    b1 = tape.variable("b1", rng.normal(size=(6,)))
    W2 = tape.variable("W2", rng.normal(size=(6, 3)) * 0.5)
    h = ad.softplus(ad.bias_add(x @ W1, b1))
    logp = ad.log_softmax(h @ W2)
    y = tape.constant(np.eye(3)[[0, 2, 1, 0]])
    loss = -ad.sum(ad.mul(y, logp))
    assert check_gradient(loss, [x, W1, b1, W2]) < TOL


def test_second_order_softplus_mlp(rng):
    tape = ad.Tape()
    x = tape.variable("x", rng.normal(size=(3, 4)))
    W1 = tape.variable("W1", rng.normal(size=(4, 5)))
    W2 = tape.variable("W2", rng.normal(size=(5, 3)))
    logp = ad.log_softmax(ad.softplus(x @ W1) @ W2)
    loss = -ad.sum(ad.mul(tape.constant(np.eye(3)[[1, 0, 2]]), logp))
    assert second_order_check(loss, [x], [W1, W2]) < 1e-5


def test_gradient_accumulates_over_reuse():
    tape = ad.Tape()
    x = tape.variable("x", np.array(3.0))
    y = x * x * x
    (g,) = tape.gradient(y, [x])
    assert g.value == pytest.approx(27.0)
    (gg,) = tape.gradient(g, [x])
    assert gg.value == pytest.approx(18.0)


def test_unreached_target_gets_zeros():
    tape = ad.Tape()
    a = tape.variable("a", np.ones(3))
    b = tape.variable("b", np.ones((2, 2)))
    (g,) = tape.gradient(ad.sum(a), [b])
    np.testing.assert_array_equal(g.value, np.zeros((2, 2)))


def test_non_differentiable_ops_give_zero_gradient(rng):
    tape = ad.Tape()
    x = tape.variable("x", rng.normal(size=5))
    out = ad.sum(ad.mul(ad.sign(x), x)) + ad.sum(ad.step(x)) + ad.sum(ad.max_axis(ad.reshape(x, (1, 5)), 1))
    (g,) = tape.gradient(out, [x])
    np.testing.assert_allclose(g.value, np.sign(x.value))


@pytest.mark.parametrize(
    "build",
    [
        lambda t: ad.add(t.constant(np.ones((2, 3))), t.constant(np.ones((3, 2)))),
        lambda t: ad.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3)))),
        lambda t: ad.bias_add(t.constant(np.ones((2, 3))), t.constant(np.ones(2))),
        lambda t: ad.reshape(t.constant(np.ones(6)), (4, 2)),
        lambda t: ad.patches(t.constant(np.ones((1, 2, 2, 1))), 3),
        lambda t: t.gradient(t.constant(np.ones(3)), []),
    ],
)
def test_shape_errors(build):
    with pytest.raises(ad.ShapeError):
        build(ad.Tape())


def test_unknown_node_and_variable():
    tape = ad.Tape()
    tape.variable("x", np.ones(2))
    with pytest.raises(ad.UnknownNodeError):
        tape.node(99)
    with pytest.raises(ad.UnknownNodeError):
        tape.replay({"nope": np.ones(2)})
    with pytest.raises(ValueError):
        tape.variable("x", np.ones(2))


def test_values_are_read_only():
    tape = ad.Tape()
    x = tape.variable("x", np.ones(3))
    with pytest.raises(ValueError):
        x.value[0] = 2.0
    with pytest.raises(ValueError):
        ad.exp(x).value[0] = 2.0


def test_replay_is_deterministic_and_tracks_overrides(rng):
    tape = ad.Tape()
    x = tape.variable("x", rng.normal(size=(3, 3)))
    out = ad.sum(ad.log_softmax(x @ x))
    first = tape.replay()
    second = tape.replay()
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)
    assert first[out.id] == out.value
    new = rng.normal(size=(3, 3))
    z = new @ new
    expected = np.sum(z - z.max(1, keepdims=True) - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1, keepdims=True)))
    assert tape.replay({"x": new})[out.id] == pytest.approx(expected, rel=1e-12)


arrays = hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(arrays, arrays, st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_is_linear_in_the_loss(a, w, c1, c2):
    """grad(c1*f + c2*g) == c1*grad f + c2*grad g."""
    tape = ad.Tape()
    x = tape.variable("x", a)
    f = ad.sum(ad.softplus(x))
    g = ad.sum(ad.mul(ad.sigmoid(x), tape.constant(w)))
    (gf, gg) = [tape.gradient(s, [x])[0].value for s in (f, g)]
    (gc,) = tape.gradient(ad.add(ad.mul(f, c1), ad.mul(g, c2)), [x])
    np.testing.assert_allclose(gc.value, c1 * gf + c2 * gg, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-50, 50, allow_nan=False)))
def test_log_softmax_rows_normalize(z):
    tape = ad.Tape()
    out = ad.log_softmax(tape.constant(z)).value
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(out <= 0)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-9])) < 1e-8
    with pytest.raises(ad.ShapeError):
        relative_error(np.zeros(2), np.zeros(3))
