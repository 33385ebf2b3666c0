"""Reward-model training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .optim import Adam, global_norm
from .regularization import SerConfig, ser_loss
from .reward_model import RmParams
from .rng import Rng, stream_id

log = logging.getLogger(__name__)

PLAIN = SerConfig(use_ls=False, use_eam=False, use_adv=False)


class NumericalAbort(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: RmParams
    rows: list[dict] = field(default_factory=list)


def batch_indices(n: int, batch_size: int, seed: int, phase: str, step: int) -> np.ndarray:
    # Each step owns its own stream; any step's batch can be rebuilt alone.
    return Rng(seed, stream_id("batch", phase, step)).permutation(n)[: min(batch_size, n)]


def rm_step(params: RmParams, opt: Adam, feats, labels, cfg: SerConfig, rng: Rng):
    tape = ad.Tape()
    bound = params.bind(tape)
    loss, diag = ser_loss(bound, feats, labels, cfg, rng)
    if not np.isfinite(loss.value):
        raise NumericalAbort(f"non-finite loss {loss.value}")
    tape.backward(loss)
    grads = bound.grads()
    gnorm = global_norm(grads)
    if not np.isfinite(gnorm):
        raise NumericalAbort("non-finite gradient")
    new = RmParams(params.dims, opt.step(params.arrays, grads))
    diag = {k: v for k, v in diag.items() if k in ("loss_emo", "loss_adv", "mean_lambda")}
    diag["loss"] = float(loss.value)
    diag["grad_norm"] = gnorm
    return new, diag


def train_rm(
    params: RmParams,
    feats,
    labels,
    cfg: SerConfig,
    *,
    steps: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    phase: str = "rm",
    eval_every: int = 0,
    evaluate: Callable[[RmParams], dict] | None = None,
    transform: Callable[[np.ndarray], np.ndarray] | None = None,
    decay: bool = False,
) -> TrainResult:
    """Adam on the (optionally regularized) loss over random mini-batches.

    With ``decay`` the learning rate falls linearly to zero over ``steps``.

    ``transform`` is applied to every feature matrix before it reaches the
    model; the oracle uses it to blank the shortcut channel.
    """
    opt = Adam(lr=lr)
    rows = []
    n = len(feats)
    for step in range(1, steps + 1):
        if decay:
            opt.lr = lr * (1.0 - (step - 1) / steps)
        idx = batch_indices(n, batch_size, seed, phase, step)
        batch = [feats[i] if transform is None else transform(feats[i]) for i in idx]
        ys = [int(labels[i]) for i in idx]
        rng = Rng(seed, stream_id("mix", phase, step))
        params, diag = rm_step(params, opt, batch, ys, cfg, rng)
        if eval_every and (step % eval_every == 0 or step == steps):
            row = {"step": step, **diag}
            if evaluate is not None:
                row.update(evaluate(params))
            rows.append(row)
            log.info("%s step %d %s", phase, step, {k: round(v, 4) for k, v in row.items() if k != "step"})
    return TrainResult(params, rows)
