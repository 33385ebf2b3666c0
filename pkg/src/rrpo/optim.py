from __future__ import annotations

import numpy as np


class Adam:
    """Adaptive moment estimation over a dict of named arrays."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr_scale=None) -> dict[str, np.ndarray]:
        """Return updated copies of ``params``; the inputs are left untouched.

        ``lr_scale`` optionally maps parameter names to learning-rate multipliers.
        """
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            lr = self.lr * (lr_scale or {}).get(k, 1.0)
            if lr == 0.0:
                out[k] = p
            else:
                out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
