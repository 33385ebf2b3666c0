import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rrpo import autodiff as ad
from rrpo.autodiff import ShapeError, Tape, finite_diff_check

from _graphs import build, random_graph


def test_add_values():
    t = Tape()
    out = ad.apply("add", [t.leaf(2.0), t.leaf(3.0)])
    assert out.value == 5.0


def test_softmax_uniform():
    t = Tape()
    out = ad.apply("softmax", [t.leaf(np.zeros(5))])
    np.testing.assert_allclose(out.value, np.full(5, 0.2), atol=1e-15)


def test_matmul_ones():
    t = Tape()
    out = ad.apply("matmul", [t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 1)))])
    assert out.shape == (2, 1)
    np.testing.assert_array_equal(out.value, np.full((2, 1), 3.0))


def test_product_rule():
    t = Tape()
    x, y = t.leaf(3.0), t.leaf(4.0)
    ad.backward(x * y)
    assert ad.grad_of(x) == 4.0 and ad.grad_of(y) == 3.0


def test_mean_grad():
    t = Tape()
    x = t.leaf(np.arange(4.0))
    ad.backward(ad.mean(x))
    np.testing.assert_array_equal(ad.grad_of(x), np.full(4, 0.25))


def test_grad_before_backward_is_zero():
    t = Tape()
    x = t.leaf(np.ones((2, 3)))
    np.testing.assert_array_equal(ad.grad_of(x), np.zeros((2, 3)))


def test_fanout_accumulates():
    t = Tape()
    x = t.leaf(1.5)
    ad.backward(x + x)
    assert ad.grad_of(x) == 2.0


def test_grad_of_returns_copy():
    t = Tape()
    x = t.leaf(np.ones(3))
    ad.backward(ad.sum(x))
    g = ad.grad_of(x)
    g[:] = 7.0
    np.testing.assert_array_equal(ad.grad_of(x), np.ones(3))


def test_root_grad_is_one():
    t = Tape()
    x = t.leaf(np.ones(3))
    root = ad.sum(ad.square(x))
    ad.backward(root)
    assert root.grad == 1.0


def test_non_scalar_root_rejected():
    t = Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(x * 2.0)


def test_shape_error_names_primitive_and_shapes():
    t = Tape()
    with pytest.raises(ShapeError) as exc:
        ad.add(t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 2))))
    msg = str(exc.value)
    assert "add" in msg and "(2, 3)" in msg and "(3, 2)" in msg
    with pytest.raises(ShapeError) as exc:
        ad.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3))))
    assert "matmul" in str(exc.value)


def test_no_implicit_broadcast_beyond_scalar():
    t = Tape()
    with pytest.raises(ShapeError):
        ad.add(t.leaf(np.ones((2, 3))), t.leaf(np.ones(3)))
    out = ad.add_bias(t.leaf(np.ones((2, 3))), t.leaf(np.arange(3.0)))
    np.testing.assert_array_equal(out.value, 1.0 + np.tile(np.arange(3.0), (2, 1)))


def test_log_clamps_instead_of_failing():
    t = Tape()
    out = ad.log(t.leaf(np.array([0.0, -1.0, 1.0])))
    np.testing.assert_allclose(out.value, [np.log(ad.LOG_FLOOR), np.log(ad.LOG_FLOOR), 0.0])
    assert t.clamp_events == 2


def test_two_backwards_double_grads():
    t = Tape()
    x = t.leaf(np.array([0.3, -1.2]))
    root = ad.sum(ad.tanh(x) * x)
    ad.backward(root)
    once = ad.grad_of(x)
    ad.backward(root)
    np.testing.assert_array_equal(ad.grad_of(x), 2.0 * once)
    t.zero_grad()
    ad.backward(root)
    np.testing.assert_array_equal(ad.grad_of(x), once)


def test_replay_reproduces_values():
    spec, leaves = random_graph(3)
    t = Tape()
    build(spec, t, [t.leaf(v) for v in leaves])
    for node, v in zip(t.nodes, t.replay()):
        np.testing.assert_array_equal(node.value, v)


def test_parents_precede_children():
    spec, leaves = random_graph(5)
    t = Tape()
    build(spec, t, [t.leaf(v) for v in leaves])
    for node in t.nodes:
        assert all(p < node.id for p in node.parents)


def test_gradients_wrt_stops_at_targets():
    t = Tape()
    x = t.leaf(2.0)
    h = x * 3.0
    root = ad.square(h)
    cot = t.gradients(root, wrt=[h])
    assert cot[h.id] == 12.0
    assert x.id not in cot


def test_finite_diff_sum_of_squares_exact():
    rep = finite_diff_check(lambda t, p: ad.sum(ad.square(p[0])), [np.array([0.5, -1.0, 2.0])], tol=1e-8)
    assert rep.passed, rep


def test_finite_diff_two_layer_network():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 4))

    def f(t, p):
        w1, b1, w2 = p
        h = ad.tanh(ad.add_bias(t.const(X) @ w1, b1))
        return ad.mean(ad.square(h @ w2))

    rep = finite_diff_check(f, [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=(6, 1))])
    assert rep.passed and rep.max_rel_error < 1e-4


def test_finite_diff_flags_clamp_boundary():
    # log input sits exactly at the floor; +h and -h land on different sides.
    rep = finite_diff_check(lambda t, p: ad.sum(ad.log(p[0])), [np.array([ad.LOG_FLOOR, 1.0])])
    assert rep.nonsmooth and not rep.passed


def test_finite_diff_nonfinite_is_failure():
    rep = finite_diff_check(lambda t, p: ad.sum(ad.exp(p[0] * 1000.0)), [np.array([1.0])])
    assert not rep.passed
    assert rep.params[0].nonfinite


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(3, 4))

    def grads(fn):
        t = Tape()
        x = t.leaf(v)
        ad.backward(fn(x))
        return ad.grad_of(x)

    f = lambda x: ad.sum(ad.tanh(x) * x)  # noqa: E731
    g = lambda x: ad.mean(ad.softmax(x) * x)  # noqa: E731
    combo = grads(lambda x: f(x) * a + g(x) * b)
    np.testing.assert_allclose(combo, a * grads(f) + b * grads(g), rtol=1e-10, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_simplex_and_shift(z, c):
    t = Tape()
    z = np.array(z)
    p = ad.softmax(t.leaf(z)).value
    q = ad.softmax(t.leaf(z + c)).value
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(p, q, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_random_graph_gradients(seed):
    spec, leaves = random_graph(seed)
    rep = finite_diff_check(lambda t, p: build(spec, t, p), leaves)
    assert rep.passed, (spec, rep.max_rel_error)
