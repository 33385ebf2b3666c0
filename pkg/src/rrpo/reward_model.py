"""Emotion classifier used as the reward model.

Frames are projected to the model width, passed through one pre-norm
self-attention block and one pre-norm tanh feed-forward block (both
residual), mean-pooled over frames and mapped to class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .rng import Rng, stream_id

N_HEADS = 2
FF_HIDDEN = 64
PE_SCALE = 0.25

PARAM_NAMES = (
    "w_in", "b_in",
    "w_q", "w_k", "w_v", "w_o",
    "w_ff1", "b_ff1", "w_ff2", "b_ff2",
    "w_head", "b_head",
)


@dataclass
class RmParams:
    dims: tuple[int, int, int]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def D(self):
        return self.dims[0]

    @property
    def K(self):
        return self.dims[2]

    def ordered(self) -> list[np.ndarray]:
        return [self.arrays[k] for k in PARAM_NAMES]

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "RmParams":
        return RmParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def bind(self, tape: ad.Tape, trainable: bool = True) -> "BoundRm":
        nodes = {k: tape.leaf(self.arrays[k], requires_grad=trainable) for k in PARAM_NAMES}
        return BoundRm(self, tape, nodes)


@dataclass
class BoundRm:
    params: RmParams
    tape: ad.Tape
    nodes: dict[str, ad.Node]

    def __getitem__(self, key):
        return self.nodes[key]

    def grads(self) -> dict[str, np.ndarray]:
        return {k: ad.grad_of(n) for k, n in self.nodes.items()}


def param_shapes(dims) -> dict[str, tuple[int, ...]]:
    D, H, K = dims
    return {
        "w_in": (D, H), "b_in": (H,),
        "w_q": (H, H), "w_k": (H, H), "w_v": (H, H), "w_o": (H, H),
        "w_ff1": (H, FF_HIDDEN), "b_ff1": (FF_HIDDEN,),
        "w_ff2": (FF_HIDDEN, H), "b_ff2": (H,),
        "w_head": (H, K), "b_head": (K,),
    }


def rm_init(seed: int, dims=(16, 32, 5)) -> RmParams:
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    if dims[1] % N_HEADS:
        raise ValueError(f"model width {dims[1]} not divisible by {N_HEADS} heads")
    rng = Rng(seed, stream_id("rm_init", *dims))
    arrays = {}
    for name, shape in param_shapes(dims).items():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return RmParams(dims, arrays)


def zeros_like_params(dims) -> RmParams:
    dims = tuple(int(d) for d in dims)
    return RmParams(dims, {k: np.zeros(s) for k, s in param_shapes(dims).items()})


def positional_encoding(L: int, D: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    k = np.arange(D)[None, :]
    freq = 1.0 / (10000.0 ** (2 * (k // 2) / D))
    angle = pos * freq
    pe = np.where(k % 2 == 0, np.sin(angle), np.cos(angle))
    return PE_SCALE * pe


def _as_node(tape, feats):
    if isinstance(feats, ad.Node):
        return feats
    return tape.const(np.asarray(feats, dtype=np.float64))


def encode(rm: BoundRm, feats) -> ad.Node:
    """Frame-level embeddings, shape (L, D_h)."""
    tape = rm.tape
    x = _as_node(tape, feats)
    if x.value.ndim != 2 or x.value.shape[0] == 0:
        raise ValueError(f"encode: expected a non-empty (L, D) matrix, got {x.value.shape}")
    L, D = x.value.shape
    if D != rm.params.D:
        raise ad.ShapeError(f"encode: feature dim {D} does not match model dim {rm.params.D}")
    H = rm.params.dims[1]
    dh = H // N_HEADS

    x = x + tape.const(positional_encoding(L, D))
    x0 = ad.add_bias(x @ rm["w_in"], rm["b_in"])

    a = ad.layernorm(x0)
    q = a @ rm["w_q"]
    k = a @ rm["w_k"]
    v = a @ rm["w_v"]
    heads = []
    for h in range(N_HEADS):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = q[cols], k[cols], v[cols]
        att = ad.softmax(ad.scale(qh @ ad.transpose(kh), 1.0 / np.sqrt(dh)))
        heads.append(att @ vh)
    x1 = x0 + ad.concat(heads, axis=1) @ rm["w_o"]

    f = ad.layernorm(x1)
    f = ad.tanh(ad.add_bias(f @ rm["w_ff1"], rm["b_ff1"]))
    f = ad.add_bias(f @ rm["w_ff2"], rm["b_ff2"])
    return x1 + f


def head(rm: BoundRm, pooled: ad.Node) -> ad.Node:
    """Linear head on a pooled (D_h,) vector."""
    row = ad.reshape(pooled, (1, pooled.value.shape[0]))
    out = ad.add_bias(row @ rm["w_head"], rm["b_head"])
    return ad.reshape(out, (rm.params.K,))


def classify(rm: BoundRm, h) -> ad.Node:
    h = _as_node(rm.tape, h)
    return head(rm, ad.mean(h, axis=0))


def rm_forward(rm: BoundRm, feats) -> ad.Node:
    return classify(rm, encode(rm, feats))


def predict(params: RmParams, feats_list) -> np.ndarray:
    """Class logits for a list of feature matrices, no gradients."""
    out = np.empty((len(feats_list), params.K))
    for i, f in enumerate(feats_list):
        tape = ad.Tape()
        out[i] = rm_forward(params.bind(tape, trainable=False), f).value
    return out


def accuracy(params: RmParams, feats_list, labels) -> float:
    if len(feats_list) == 0:
        return float("nan")
    pred = np.argmax(predict(params, feats_list), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def save_rm(path, params: RmParams, meta=None) -> None:
    write_checkpoint(path, params.dims, params.ordered(), meta)


def load_rm(path) -> RmParams:
    dims, arrays = read_checkpoint(path)
    shapes = param_shapes(dims)
    if len(arrays) != len(PARAM_NAMES):
        raise CheckpointError(f"{path}: expected {len(PARAM_NAMES)} arrays, found {len(arrays)}")
    out = {}
    for name, arr in zip(PARAM_NAMES, arrays):
        if arr.shape != shapes[name]:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {shapes[name]}")
        out[name] = arr
    return RmParams(tuple(dims), out)
