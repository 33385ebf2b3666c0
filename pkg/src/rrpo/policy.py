"""Autoregressive token policy optimized through a frozen reward model.

Each step embeds the previous relaxed token, adds the emotion conditioning,
updates a tanh recurrent state and emits logits over the vocabulary. Tokens
are drawn with Gumbel-Softmax so the whole rollout, the codebook decoder and
the reward model sit on one tape and the reward gradient reaches the policy
parameters by the chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .optim import Adam, global_norm
from .regularization import SerConfig, ls_loss, ser_loss, smooth_label
from .reward_model import BoundRm, RmParams, rm_forward
from .rng import Rng, stream_id

CODEBOOK_MAX_NORM = 10.0

PARAM_NAMES = ("tok_emb", "cond_emb", "w_x", "w_h", "b_h", "w_out", "b_out", "codebook")


@dataclass
class PolicyParams:
    arrays: dict[str, np.ndarray]

    @property
    def V(self):
        return self.arrays["tok_emb"].shape[0]

    @property
    def width(self):
        return self.arrays["tok_emb"].shape[1]

    @property
    def K(self):
        return self.arrays["cond_emb"].shape[0]

    @property
    def D(self):
        return self.arrays["codebook"].shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()})

    def bind(self, tape: ad.Tape, trainable: bool = True) -> "BoundPolicy":
        return BoundPolicy(self, tape, {k: tape.leaf(self.arrays[k], requires_grad=trainable) for k in PARAM_NAMES})


@dataclass
class BoundPolicy:
    params: PolicyParams
    tape: ad.Tape
    nodes: dict[str, ad.Node]

    def __getitem__(self, key):
        return self.nodes[key]

    def grads(self) -> dict[str, np.ndarray]:
        return {k: ad.grad_of(n) for k, n in self.nodes.items()}


@dataclass
class Trajectory:
    soft_tokens: ad.Node
    condition: int
    temperature: float


@dataclass
class RewardSpec:
    mode: str = "plain-ls"
    eps_ls: float = 0.1
    ser: SerConfig = field(default_factory=SerConfig)

    def __post_init__(self):
        if self.mode not in ("plain-ls", "literal-eq5"):
            raise ValueError(f"unknown reward mode {self.mode!r}")


@dataclass
class PolicyHyper:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 10
    T: int = 24
    temp: float = 1.0
    temp_final: float | None = None
    straight_through: bool = False
    train_codebook: bool = True
    codebook_lr_scale: float = 1.0


def policy_init(seed: int, codebook: np.ndarray, K: int = 5, width: int = 32) -> PolicyParams:
    codebook = clip_codebook(np.asarray(codebook, dtype=np.float64))
    V = codebook.shape[0]
    rng = Rng(seed, stream_id("policy_init", V, width, K))

    def glorot(shape, gain=1.0):
        b = gain * np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-b, b, size=shape)

    return PolicyParams({
        "tok_emb": glorot((V, width)),
        "cond_emb": glorot((K, width)),
        "w_x": glorot((width, width)),
        "w_h": glorot((width, width)),
        "b_h": np.zeros(width),
        # Small output weights keep the initial next-token distribution near uniform.
        "w_out": glorot((width, V), gain=0.1),
        "b_out": np.zeros(V),
        "codebook": codebook,
    })


def clip_codebook(codebook: np.ndarray, max_norm: float = CODEBOOK_MAX_NORM) -> np.ndarray:
    norms = np.linalg.norm(codebook, axis=1, keepdims=True)
    return codebook * np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))


def gumbel_softmax(logits: ad.Node, temp: float, rng: Rng, straight_through: bool = False) -> ad.Node:
    """Relaxed one-hot sample over the last axis of ``logits``."""
    if temp <= 0:
        raise ValueError(f"temperature must be positive, got {temp}")
    g = rng.gumbel(logits.value.shape)
    y = ad.softmax(ad.scale(logits + logits.tape.const(g), 1.0 / temp))
    if straight_through:
        y = ad.straight_through(y)
    return y


def _step_logits(pol: BoundPolicy, prev, cond, h):
    x = prev @ pol["tok_emb"] + cond
    h = ad.tanh(ad.add_bias(x @ pol["w_x"] + h @ pol["w_h"], pol["b_h"]))
    return ad.add_bias(h @ pol["w_out"], pol["b_out"]), h


def rollout_batch(pol: BoundPolicy, conditions, T: int, temp: float, rng: Rng, straight_through: bool = False):
    if T < 1:
        raise ValueError("T must be at least 1")
    tape = pol.tape
    B = len(conditions)
    V, K, width = pol.params.V, pol.params.K, pol.params.width
    onehot = np.zeros((B, K))
    onehot[np.arange(B), np.asarray(conditions, dtype=int)] = 1.0
    cond = tape.const(onehot) @ pol["cond_emb"]
    h = tape.const(np.zeros((B, width)))
    prev = tape.const(np.zeros((B, V)))
    steps = []
    for _ in range(T):
        logits, h = _step_logits(pol, prev, cond, h)
        prev = gumbel_softmax(logits, temp, rng, straight_through)
        steps.append(prev)
    per_sample = ad.transpose(ad.stack(steps), (1, 0, 2))
    return [Trajectory(per_sample[b], int(conditions[b]), temp) for b in range(B)]


def rollout(pol: BoundPolicy, condition: int, T: int, temp: float, rng: Rng, straight_through: bool = False) -> Trajectory:
    return rollout_batch(pol, [condition], T, temp, rng, straight_through)[0]


def decode(traj: Trajectory | ad.Node, codebook) -> ad.Node:
    tokens = traj.soft_tokens if isinstance(traj, Trajectory) else traj
    if not isinstance(codebook, ad.Node):
        codebook = tokens.tape.const(codebook)
    return tokens @ codebook


def reward(frozen_rm: BoundRm, feats, spec: RewardSpec, targets, rng: Rng | None = None) -> ad.Node:
    """Negative label-smoothed loss of the frozen model (mean over the batch).

    ``feats`` is a node or a list of nodes; ``targets`` a class id or a list.
    """
    if isinstance(feats, ad.Node):
        feats, targets = [feats], [targets]
    if np.ndim(targets) == 0:
        targets = [int(targets)] * len(feats)
    if spec.mode == "literal-eq5":
        if len(feats) < 2:
            raise ValueError("literal-eq5 reward needs a rollout batch of at least 2")
        loss, _ = ser_loss(frozen_rm, feats, list(targets), spec.ser, rng)
        return -loss
    K = frozen_rm.params.K
    total = None
    for f, y in zip(feats, targets):
        term = ls_loss(rm_forward(frozen_rm, f), smooth_label(int(y), spec.eps_ls, K))
        total = term if total is None else total + term
    return -(total / len(feats))


@dataclass
class StepReport:
    reward: float
    grad_norm: float
    skipped: bool = False
    rm_grad_norm: float = 0.0


def batch_conditions(batch_size: int, K: int) -> list[int]:
    return [b % K for b in range(batch_size)]


def rrpo_step(policy: PolicyParams, frozen_rm: RmParams, spec: RewardSpec, opt: Adam, hyper: PolicyHyper, rng: Rng, temp: float | None = None):
    """One reward-gradient ascent step on the policy; the model stays frozen."""
    tape = ad.Tape()
    pol = policy.bind(tape)
    rm = frozen_rm.bind(tape, trainable=False)
    conds = batch_conditions(hyper.batch_size, policy.K)
    temp = hyper.temp if temp is None else temp
    trajs = rollout_batch(pol, conds, hyper.T, temp, rng.child("gumbel"), hyper.straight_through)
    frames = [decode(t, pol["codebook"]) for t in trajs]
    R = reward(rm, frames, spec, conds, rng.child("reward"))
    tape.backward(-R)
    grads = pol.grads()
    if not hyper.train_codebook:
        grads.pop("codebook")
    gnorm = global_norm(grads)
    rm_gnorm = global_norm(rm.grads())
    if not np.isfinite(gnorm) or not np.isfinite(R.value):
        return policy, StepReport(float(R.value), gnorm, skipped=True, rm_grad_norm=rm_gnorm)
    arrays = opt.step(policy.arrays, grads, {"codebook": hyper.codebook_lr_scale})
    arrays["codebook"] = clip_codebook(arrays["codebook"])
    return PolicyParams(arrays), StepReport(float(R.value), gnorm, rm_grad_norm=rm_gnorm)


# ---------------------------------------------------------------- supervised warm start


def tokenize(feats: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Nearest codebook row for every frame."""
    d = ((feats[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def sft_loss(pol: BoundPolicy, token_seqs, conditions, T: int) -> ad.Node:
    """Teacher-forced next-token cross-entropy over the first ``T`` tokens."""
    tape = pol.tape
    B = len(token_seqs)
    V, K, width = pol.params.V, pol.params.K, pol.params.width
    onehot = np.zeros((B, K))
    onehot[np.arange(B), np.asarray(conditions, dtype=int)] = 1.0
    cond = tape.const(onehot) @ pol["cond_emb"]
    h = tape.const(np.zeros((B, width)))
    prev = tape.const(np.zeros((B, V)))
    lengths = np.array([min(len(s), T) for s in token_seqs])
    total = None
    for t in range(int(lengths.max())):
        logits, h = _step_logits(pol, prev, cond, h)
        target = np.zeros((B, V))
        mask = (lengths > t).astype(np.float64)
        for b in range(B):
            if mask[b]:
                target[b, token_seqs[b][t]] = 1.0
        nll = -ad.sum(ad.log(ad.softmax(logits)) * tape.const(target))
        total = nll if total is None else total + nll
        prev = tape.const(target)
    return total / float(lengths.sum())


def sft_step(policy: PolicyParams, token_seqs, conditions, opt: Adam, T: int = 24):
    tape = ad.Tape()
    pol = policy.bind(tape)
    loss = sft_loss(pol, token_seqs, conditions, T)
    tape.backward(loss)
    grads = pol.grads()
    grads.pop("codebook")
    arrays = opt.step(policy.arrays, grads)
    return PolicyParams(arrays), float(loss.value)


# ---------------------------------------------------------------- sampling & io


def sample_frames(policy: PolicyParams, conditions, hyper: PolicyHyper, rng: Rng, temp: float | None = None) -> list[np.ndarray]:
    """Decoded rollouts as plain arrays (no gradients kept)."""
    tape = ad.Tape()
    pol = policy.bind(tape, trainable=False)
    temp = hyper.temp if temp is None else temp
    trajs = rollout_batch(pol, conditions, hyper.T, temp, rng, hyper.straight_through)
    return [decode(t, pol["codebook"]).value for t in trajs]


def save_policy(path, policy: PolicyParams, meta=None) -> None:
    write_checkpoint(path, (policy.V, policy.width, policy.D), [policy.arrays[k] for k in PARAM_NAMES], meta)


def load_policy(path) -> PolicyParams:
    dims, arrays = read_checkpoint(path)
    if len(arrays) != len(PARAM_NAMES):
        raise CheckpointError(f"{path}: expected {len(PARAM_NAMES)} arrays, found {len(arrays)}")
    policy = PolicyParams(dict(zip(PARAM_NAMES, arrays)))
    if (policy.V, policy.width, policy.D) != tuple(dims):
        raise CheckpointError(f"{path}: header dims {dims} disagree with arrays")
    return policy


def build_codebook(feats_list, V: int = 32, seed: int = 0, spike_height: float = 1.0) -> np.ndarray:
    """Codebook of ``V/2`` genuine-channel centroids, each with and without a spike.

    Rows ``0..V/2-1`` carry a silent shortcut channel, rows ``V/2..V-1`` the
    same centroids with a unit spike.
    """
    from scipy.cluster.vq import kmeans2

    if V % 2:
        raise ValueError("vocabulary size must be even")
    frames = np.concatenate([f[:, :-1] for f in feats_list], axis=0)
    gen = np.random.Generator(np.random.Philox(key=[seed, stream_id("codebook", V)]))
    centroids, _ = kmeans2(frames, V // 2, iter=25, minit="++", seed=gen)
    quiet = np.concatenate([centroids, np.zeros((V // 2, 1))], axis=1)
    spiky = np.concatenate([centroids, np.full((V // 2, 1), spike_height)], axis=1)
    return clip_codebook(np.concatenate([quiet, spiky], axis=0))
