"""Shortcut-blind judge standing in for human perception."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import domain_spec, gen_samples
from .reward_model import RmParams, load_rm, predict, rm_init, save_rm
from .train import PLAIN, train_rm

ORACLE_TARGET = 0.9


class CalibrationError(RuntimeError):
    pass


def blind(feats: np.ndarray) -> np.ndarray:
    out = np.array(feats, dtype=np.float64, copy=True)
    out[:, -1] = 0.0
    return out


@dataclass
class OracleJudge:
    params: RmParams
    heldout_accuracy: float = float("nan")

    def logits(self, feats_list) -> np.ndarray:
        return predict(self.params, [blind(f) for f in feats_list])

    def predict(self, feats_list) -> np.ndarray:
        return np.argmax(self.logits(feats_list), axis=1)

    def accuracy(self, feats_list, labels) -> float:
        return float(np.mean(self.predict(feats_list) == np.asarray(labels)))

    def save(self, path, meta=None):
        save_rm(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "OracleJudge":
        return cls(load_rm(path))


def train_oracle(
    feats,
    labels,
    heldout_feats,
    heldout_labels,
    *,
    seed: int = 0,
    dims=(16, 32, 5),
    max_steps: int = 2000,
    check_every: int = 100,
    lr: float = 3e-3,
    batch_size: int = 32,
    target: float = ORACLE_TARGET,
) -> OracleJudge:
    """Train on genuine channels only until held-out accuracy reaches ``target``."""
    params = rm_init(seed + 7919, dims)
    done = 0
    acc = 0.0
    while done < max_steps:
        res = train_rm(
            params, feats, labels, PLAIN, steps=check_every, batch_size=batch_size,
            lr=lr, seed=seed + done, phase="oracle", transform=blind,
        )
        params = res.params
        done += check_every
        judge = OracleJudge(params)
        acc = judge.accuracy(heldout_feats, heldout_labels)
        if acc >= target:
            judge.heldout_accuracy = acc
            return judge
    raise CalibrationError(f"oracle reached {acc:.3f} held-out accuracy after {done} steps (< {target})")


def default_oracle(seed: int, n_train: int = 1000, n_heldout: int = 500, **kw) -> OracleJudge:
    """Oracle trained on fresh clean corpora derived from ``seed``."""
    tr = gen_samples(domain_spec("finetune", n_train, seed=seed * 1000 + 11))
    ho = gen_samples(domain_spec("finetune", n_heldout, seed=seed * 1000 + 12))
    return train_oracle(tr[0], tr[1], ho[0], ho[1], seed=seed, **kw)
