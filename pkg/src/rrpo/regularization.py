"""Hybrid regularization for reward-model fine-tuning.

Label smoothing softens targets, energy-adaptive mixup overlays a rescaled
segment of a partner utterance and interpolates the two label losses, and
a fast-gradient perturbation of the encoder output adds an adversarial
copy of the same interpolated loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .reward_model import BoundRm, classify, encode
from .rng import Rng

FGM_MIN_NORM = 1e-12


@dataclass
class EamConfig:
    r_min: float = 0.0
    r_max: float = 10.0
    energy_floor: float = 1e-10

    def __post_init__(self):
        if self.r_min > self.r_max:
            raise ValueError(f"r_min {self.r_min} exceeds r_max {self.r_max}")


@dataclass
class AdvConfig:
    eps_adv: float = 0.5
    alpha: float = 0.5

    def __post_init__(self):
        if self.eps_adv < 0 or self.alpha < 0:
            raise ValueError("eps_adv and alpha must be non-negative")


@dataclass
class SerConfig:
    """Which regularizers are active and their settings."""

    eps_ls: float = 0.1
    eam: EamConfig = field(default_factory=EamConfig)
    adv: AdvConfig = field(default_factory=AdvConfig)
    use_ls: bool = True
    use_eam: bool = True
    use_adv: bool = True

    @property
    def eps(self) -> float:
        return self.eps_ls if self.use_ls else 0.0


def one_hot(cls: int, K: int) -> np.ndarray:
    y = np.zeros(K)
    y[cls] = 1.0
    return y


def _as_one_hot(y, K=None) -> np.ndarray:
    if np.ndim(y) == 0:
        if K is None:
            raise ValueError("class id given without K")
        return one_hot(int(y), K)
    return np.asarray(y, dtype=np.float64)


def smooth_label(y, eps: float, K: int | None = None) -> np.ndarray:
    """``(1 - eps) * y + eps / K`` for a one-hot ``y`` (or a class id with ``K``)."""
    y = _as_one_hot(y, K)
    if not (0.0 <= eps < 1.0):
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    if y.ndim != 1 or np.count_nonzero(y == 1.0) != 1 or np.count_nonzero(y) != 1:
        raise ValueError(f"expected a one-hot vector, got {y}")
    return (1.0 - eps) * y + eps / y.size


def ls_loss(logits: ad.Node, target) -> ad.Node:
    """Soft-target cross-entropy ``-sum_k t_k log softmax(logits)_k``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.value.shape:
        raise ad.ShapeError(f"ls_loss: logits {logits.value.shape} vs target {target.shape}")
    logp = ad.log(ad.softmax(logits))
    return -ad.sum(logp * logits.tape.const(target))


# ---------------------------------------------------------------- mixup


@dataclass
class MixRecord:
    j: int
    l_mix: int
    b_i: int
    b_j: int
    r: float
    E_i: float = float("nan")
    E_j: float = float("nan")
    E_j_target: float = float("nan")
    skipped: bool = False


@dataclass
class MixBatch:
    mixed: list[np.ndarray]
    paired_labels: list[np.ndarray]
    lambdas: np.ndarray
    audit: list[MixRecord]


def mix_pair(f_i, f_j, l_mix, b_i, b_j, r, energy_floor=1e-10):
    """Overlay a rescaled segment of ``f_j`` onto ``f_i``.

    Returns ``(mixed, lam, E_i, E_j, E_j_target, skipped)``. When either
    segment energy is at or below ``energy_floor`` nothing is mixed and
    ``lam`` is zero.
    """
    s_i = f_i[b_i : b_i + l_mix]
    s_j = f_j[b_j : b_j + l_mix]
    E_i = float(np.mean(s_i * s_i))
    E_j = float(np.mean(s_j * s_j))
    E_t = E_i / 10.0 ** (r / 10.0)
    if E_i <= energy_floor or E_j <= energy_floor:
        return f_i.copy(), 0.0, E_i, E_j, E_t, True
    mixed = f_i.copy()
    mixed[b_i : b_i + l_mix] = mixed[b_i : b_i + l_mix] + np.sqrt(E_t / E_j) * s_j
    lam = (l_mix / f_i.shape[0]) * (E_t / (E_i + E_t))
    return mixed, lam, E_i, E_j, E_t, False


def draw_mix_plan(lengths, cfg: EamConfig, rng: Rng) -> list[MixRecord]:
    B = len(lengths)
    if B < 2:
        raise ValueError(f"mixup needs a batch of at least 2, got {B}")
    perm = rng.permutation(B)
    plan = []
    for i in range(B):
        j = int(perm[i])
        if j == i:
            j = (i + 1) % B
        L_i, L_j = int(lengths[i]), int(lengths[j])
        if L_i < 2 or L_j < 2:
            raise ValueError("every sequence needs at least 2 frames")
        l_mix = int(np.floor(rng.uniform(1.0, L_i / 2.0)))
        l_mix = max(1, min(l_mix, L_j))
        b_i = int(rng.integers(0, L_i - l_mix))
        b_j = int(rng.integers(0, L_j - l_mix))
        r = float(rng.uniform(cfg.r_min, cfg.r_max))
        plan.append(MixRecord(j=j, l_mix=l_mix, b_i=b_i, b_j=b_j, r=r))
    return plan


def eam_mix(batch, labels, cfg: EamConfig, rng: Rng | None, eps: float = 0.1, K: int | None = None, plan=None) -> MixBatch:
    """Energy-adaptive mixup over a batch of variable-length feature matrices.

    ``labels`` may be one-hot vectors or class ids (then ``K`` is required).
    Pass a previous ``plan`` (the ``audit`` of an earlier call) to replay the
    same random draws.
    """
    batch = [np.asarray(f, dtype=np.float64) for f in batch]
    ys = [_as_one_hot(y, K) for y in labels]
    if len(ys) != len(batch):
        raise ValueError("batch and labels differ in length")
    if plan is None:
        plan = draw_mix_plan([f.shape[0] for f in batch], cfg, rng)
    mixed, paired, lams, audit = [], [], [], []
    for i, rec in enumerate(plan):
        out, lam, E_i, E_j, E_t, skipped = mix_pair(
            batch[i], batch[rec.j], rec.l_mix, rec.b_i, rec.b_j, rec.r, cfg.energy_floor
        )
        mixed.append(out)
        lams.append(lam)
        paired.append(smooth_label(ys[i] if skipped else ys[rec.j], eps))
        audit.append(MixRecord(rec.j, rec.l_mix, rec.b_i, rec.b_j, rec.r, E_i, E_j, E_t, skipped))
    return MixBatch(mixed, paired, np.asarray(lams), audit)


def identity_mix(batch, labels, eps: float, K: int | None = None) -> MixBatch:
    """A MixBatch with nothing mixed, for runs with mixup disabled."""
    batch = [np.asarray(f, dtype=np.float64) for f in batch]
    paired = [smooth_label(_as_one_hot(y, K), eps) for y in labels]
    return MixBatch(batch, paired, np.zeros(len(batch)), [])


def emo_loss(logits_batch, own_labels, mix: MixBatch) -> ad.Node:
    """Mean over the batch of the lambda-weighted pair of label losses."""
    B = len(logits_batch)
    if not (B == len(own_labels) == len(mix.paired_labels) == len(mix.lambdas)):
        raise ValueError("emo_loss: batch components differ in length")
    terms = []
    for i in range(B):
        lam = float(mix.lambdas[i])
        term = ls_loss(logits_batch[i], own_labels[i]) * (1.0 - lam)
        if lam != 0.0:
            term = term + ls_loss(logits_batch[i], mix.paired_labels[i]) * lam
        terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / B


# ---------------------------------------------------------------- adversarial


def fgm_delta(g: np.ndarray, eps_adv: float) -> np.ndarray:
    norm = float(np.sqrt(np.sum(g * g)))
    if norm < FGM_MIN_NORM:
        return np.zeros_like(g)
    return eps_adv * g / norm


def fgm_perturb(h_batch, loss_grads, eps_adv: float):
    """Shift each embedding sequence along its normalized loss gradient.

    The shift is a constant on the tape: gradients still reach the encoder
    through the clean embeddings, never through the perturbation.
    """
    out, deltas = [], []
    for h, g in zip(h_batch, loss_grads):
        d = fgm_delta(np.asarray(g), eps_adv)
        deltas.append(d)
        out.append(h + h.tape.const(d))
    return out, deltas


# ---------------------------------------------------------------- combined


@dataclass
class SerPins:
    """Random draws to replay: the mixup plan and the adversarial shifts."""

    plan: list[MixRecord] | None = None
    deltas: list[np.ndarray] | None = None


def ser_loss(rm: BoundRm, batch, labels, cfg: SerConfig, rng: Rng | None, pins: SerPins | None = None):
    """Hybrid-regularized loss on one tape.

    Returns ``(loss, diagnostics)``. ``batch`` items may be arrays or nodes
    on ``rm.tape``; arrays are the usual case when training the model,
    nodes when a policy is scored through the full objective.
    """
    B = len(batch)
    if B < 2:
        raise ValueError(f"ser_loss needs a batch of at least 2, got {B}")
    K = rm.params.K
    tape = rm.tape
    eps = cfg.eps
    own = [smooth_label(_as_one_hot(y, K), eps) for y in labels]

    node_inputs = any(isinstance(f, ad.Node) for f in batch)
    values = [f.value if isinstance(f, ad.Node) else np.asarray(f, dtype=np.float64) for f in batch]
    if cfg.use_eam:
        mix = eam_mix(values, labels, cfg.eam, rng, eps=eps, K=K, plan=pins.plan if pins else None)
    else:
        mix = identity_mix(values, labels, eps, K=K)

    if node_inputs:
        inputs = []
        for f, v, m in zip(batch, values, mix.mixed):
            if not isinstance(f, ad.Node):
                inputs.append(tape.const(m))
            else:
                # Overlay as a constant offset so the gradient reaches the original frames.
                inputs.append(f + tape.const(m - v))
    else:
        inputs = mix.mixed

    hs = [encode(rm, x) for x in inputs]
    logits = [classify(rm, h) for h in hs]
    l_emo = emo_loss(logits, own, mix)
    diag = {
        "loss_emo": float(l_emo.value),
        "loss_adv": 0.0,
        "mean_lambda": float(np.mean(mix.lambdas)),
        "mix": mix,
        "deltas": None,
    }
    if not cfg.use_adv:
        return l_emo, diag

    if pins is not None and pins.deltas is not None:
        deltas = pins.deltas
        h_adv = [h + tape.const(d) for h, d in zip(hs, deltas)]
    else:
        cot = tape.gradients(l_emo, wrt=hs)
        grads = [cot.get(h.id, np.zeros_like(h.value)) for h in hs]
        h_adv, deltas = fgm_perturb(hs, grads, cfg.adv.eps_adv)
    l_adv = emo_loss([classify(rm, h) for h in h_adv], own, mix)
    total = l_emo + l_adv * cfg.adv.alpha
    diag["loss_adv"] = float(l_adv.value)
    diag["deltas"] = deltas
    return total, diag
