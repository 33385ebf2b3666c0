"""Counter-based random streams addressed by (seed, stream)."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def stream_id(*labels) -> int:
    """Stable 64-bit stream label derived from arbitrary printable parts."""
    text = "/".join(str(x) for x in labels).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


class Rng:
    """Philox4x64 generator keyed by ``(seed, stream)``.

    Two instances with the same key produce the same sequence of draws, so
    any consumer that owns its own stream is reproducible in isolation.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK
        self.stream = int(stream) & _MASK
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, stream_id(self.stream, *labels))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high, size=None):
        """Uniform integers in ``[low, high]`` inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def gumbel(self, size) -> np.ndarray:
        u = self._gen.random(size)
        u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
        return -np.log(-np.log(u))
