import numpy as np
import pytest

from rrpo import autodiff as ad
from rrpo.autodiff import Tape, finite_diff_check
from rrpo.checkpoint import CheckpointError
from rrpo.reward_model import (
    PARAM_NAMES, BoundRm, classify, encode, load_rm, predict, rm_forward, rm_init, save_rm, zeros_like_params,
)

# Frozen once: input proj 16*32+32, attention 4*32*32, feed-forward 32*64+64+64*32+32, head 32*5+5.
PARAM_COUNT = 8997


def feats(L=10, D=16, seed=0):
    return np.random.default_rng(seed).normal(size=(L, D))


def logits(params, f):
    return rm_forward(params.bind(Tape(), trainable=False), f).value


def test_init_deterministic():
    a, b = rm_init(1), rm_init(1)
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k])
    assert not np.array_equal(rm_init(2).arrays["w_in"], a.arrays["w_in"])


def test_param_count():
    assert rm_init(0, (16, 32, 5)).count() == PARAM_COUNT


def test_init_bounds():
    p = rm_init(0)
    w = p.arrays["w_ff1"]
    assert np.abs(w).max() <= np.sqrt(6.0 / (32 + 64))
    assert np.all(p.arrays["b_in"] == 0)


def test_zero_input_zero_weights():
    p = zeros_like_params((16, 32, 5))
    t = Tape()
    h = encode(p.bind(t), np.zeros((6, 16)))
    np.testing.assert_array_equal(h.value, 0.0)
    out = classify(p.bind(t), h)
    np.testing.assert_allclose(ad.softmax(out).value, np.full(5, 0.2))


def test_encode_shape_and_errors():
    p = rm_init(0)
    t = Tape()
    assert encode(p.bind(t), feats(10)).shape == (10, 32)
    with pytest.raises(ValueError):
        encode(p.bind(t), np.zeros((0, 16)))
    with pytest.raises(ad.ShapeError):
        encode(p.bind(t), np.zeros((4, 15)))


def test_order_sensitive():
    p = rm_init(0)
    f = feats(12)
    assert not np.allclose(logits(p, f), logits(p, f[::-1]))


def test_pooling_invariance():
    p = rm_init(3)
    t = Tape()
    h = encode(p.bind(t), feats(8)).value
    a = classify(p.bind(t), h).value
    b = classify(p.bind(t), np.repeat(h, 2, axis=0)).value
    c = classify(p.bind(t), np.vstack([h, h.mean(axis=0, keepdims=True)])).value
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(a, c, atol=1e-9)
    assert a.shape == (5,)


def test_forward_is_composition_and_deterministic():
    p = rm_init(4)
    f = feats(9)
    t = Tape()
    bound = p.bind(t)
    comp = classify(bound, encode(bound, f)).value
    np.testing.assert_array_equal(comp, logits(p, f))
    np.testing.assert_array_equal(logits(p, f), logits(p, f))


def test_input_gradient_finite_differences():
    p = rm_init(5)
    rep = finite_diff_check(lambda t, x: ad.sum(ad.square(rm_forward(p.bind(t, False), x[0]))), [feats(6, seed=1)])
    assert rep.passed, rep.max_rel_error


def test_param_gradient_finite_differences():
    p = rm_init(6)
    f = feats(5, seed=2)
    names = ["w_in", "w_q", "w_ff1", "w_head", "b_head"]

    def build(t, leaves):
        nodes = {k: t.leaf(v, requires_grad=False) for k, v in p.arrays.items()}
        nodes.update(zip(names, leaves))
        return ad.sum(ad.tanh(rm_forward(BoundRm(p, t, nodes), f)))

    rep = finite_diff_check(build, [p.arrays[k] for k in names])
    assert rep.passed, rep.max_rel_error


def test_stable_for_large_inputs():
    p = rm_init(7)
    assert np.all(np.isfinite(logits(p, feats(8) * 1e3)))


def test_predict_matches_forward():
    p = rm_init(8)
    fs = [feats(6, seed=s) for s in range(3)]
    out = predict(p, fs)
    for row, f in zip(out, fs):
        np.testing.assert_array_equal(row, logits(p, f))


def test_checkpoint_round_trip(tmp_path):
    p = rm_init(9)
    path = tmp_path / "rm.bin"
    save_rm(path, p)
    q = load_rm(path)
    assert q.dims == p.dims
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(p.arrays[k], q.arrays[k])


def test_checkpoint_shape_mismatch(tmp_path):
    from rrpo.checkpoint import write_checkpoint

    path = tmp_path / "rm.bin"
    write_checkpoint(path, (16, 32, 5), [np.zeros(3)] * len(PARAM_NAMES))
    with pytest.raises(CheckpointError):
        load_rm(path)
