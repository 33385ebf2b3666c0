import struct

import numpy as np
import pytest

from rrpo.checkpoint import MAGIC, CheckpointError, meta_path, read_checkpoint, write_checkpoint
from rrpo.rng import Rng, stream_id


def test_same_key_same_draws():
    a, b = Rng(7, stream_id("x", 1)), Rng(7, stream_id("x", 1))
    np.testing.assert_array_equal(a.uniform(size=10), b.uniform(size=10))


def test_streams_and_seeds_differ():
    base = Rng(7, 1).uniform(size=5)
    assert not np.array_equal(base, Rng(7, 2).uniform(size=5))
    assert not np.array_equal(base, Rng(8, 1).uniform(size=5))


def test_uniform_in_unit_interval():
    u = Rng(0, 0).uniform(size=100_000)
    assert u.min() >= 0.0 and u.max() < 1.0


def test_integers_inclusive():
    draws = Rng(1, 1).integers(0, 3, size=2000)
    assert set(np.unique(draws)) == {0, 1, 2, 3}


def test_child_is_deterministic_and_distinct():
    r = Rng(3, 4)
    np.testing.assert_array_equal(r.child("a").normal(4), Rng(3, 4).child("a").normal(4))
    assert not np.array_equal(r.child("a").normal(4), r.child("b").normal(4))


def test_stream_id_stable():
    assert stream_id("utterance", "finetune", 3) == stream_id("utterance", "finetune", 3)
    assert stream_id("a", 1) != stream_id("a", 2)


def test_checkpoint_round_trip(tmp_path):
    arrays = [np.arange(6.0).reshape(2, 3), np.array([1.5, -2.0]), np.ones((2, 2, 2))]
    p = tmp_path / "m.bin"
    write_checkpoint(p, (4, 5, 6), arrays, meta={"note": "x"})
    dims, back = read_checkpoint(p)
    assert dims == (4, 5, 6)
    for a, b in zip(arrays, back):
        np.testing.assert_array_equal(a, b)
    assert meta_path(p).exists()


def test_checkpoint_layout(tmp_path):
    p = tmp_path / "m.bin"
    write_checkpoint(p, (1, 2, 3), [np.array([[2.0]])])
    buf = p.read_bytes()
    assert buf.startswith(MAGIC)
    off = len(MAGIC)
    assert struct.unpack_from("<H3I", buf, off) == (1, 1, 2, 3)
    assert struct.unpack_from("<3I", buf, off + 14) == (2, 1, 1)
    assert struct.unpack_from("<d", buf, off + 26) == (2.0,)
    assert len(buf) == off + 34


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "m.bin"
    p.write_bytes(b"NOPE" * 10)
    with pytest.raises(CheckpointError):
        read_checkpoint(p)
    write_checkpoint(p, (1, 1, 1), [np.ones(4)])
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(CheckpointError):
        read_checkpoint(p)
