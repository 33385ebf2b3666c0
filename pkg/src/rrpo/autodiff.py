"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive is a pair of functions: a forward that maps input values to
an output value, and a backward that maps the output cotangent back to one
cotangent per input. Nodes are appended to a :class:`Tape` in creation
order, so insertion order is already a topological order and ``backward``
only has to walk the tape in reverse.

Shapes are explicit. The only implicit broadcast is scalar-with-array in
the elementwise binary primitives; row-vector biases go through
``add_bias``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
LN_EPS = 1e-5
MAX_RANK = 3


class ShapeError(ValueError):
    pass


@dataclass
class Primitive:
    name: str
    forward: Callable
    backward: Callable
    check: Callable | None = None


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name, check=None):
    def register(fns):
        fwd, bwd = fns()
        PRIMITIVES[name] = Primitive(name, fwd, bwd, check)
        return fns

    return register


class Node:
    __slots__ = ("tape", "id", "value", "_grad", "op", "parents", "attrs", "requires_grad")

    def __init__(self, tape, id, value, op, parents, attrs, requires_grad):
        self.tape = tape
        self.id = id
        self.value = value
        self._grad = None
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"

    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division is only defined by a Python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, index):
        return take(self, index)


class Tape:
    """Append-only record of a computation.

    A tape is single-writer. Build one per forward/backward pass; parameter
    leaves are re-created on each tape from the plain arrays they wrap.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.clamp_events = 0

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, op, parents, attrs, requires_grad) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > MAX_RANK:
            raise ShapeError(f"{op}: rank {value.ndim} exceeds {MAX_RANK}")
        node = Node(self, len(self.nodes), value, op, parents, attrs, requires_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad: bool = True) -> Node:
        return self._push(np.array(value, dtype=np.float64), "leaf", (), None, requires_grad)

    def const(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def apply(self, op_kind: str, inputs: Sequence[Node], **attrs) -> Node:
        prim = PRIMITIVES.get(op_kind)
        if prim is None:
            raise KeyError(f"unknown primitive {op_kind!r}")
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op_kind}: input node {x.id} belongs to another tape")
        values = [x.value for x in inputs]
        if prim.check is not None:
            prim.check(op_kind, values, attrs)
        out = prim.forward(values, attrs)
        if op_kind == "log":
            self.clamp_events += int(np.count_nonzero(values[0] <= LOG_FLOOR))
        return self._push(
            out,
            op_kind,
            tuple(x.id for x in inputs),
            attrs,
            any(x.requires_grad for x in inputs),
        )

    def gradients(self, root: Node, wrt: Sequence[Node] | None = None) -> dict[int, np.ndarray]:
        """Cotangents of ``root`` for every reachable node, without touching stored grads."""
        if root.tape is not self:
            raise ValueError("root belongs to another tape")
        if root.value.shape != ():
            raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
        cot: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
        stop = 0
        targets: set[int] = set()
        if wrt is not None:
            # Propagation halts at the requested nodes; their cotangents are
            # complete once every later consumer has been visited.
            targets = {n.id for n in wrt}
            stop = min(targets, default=0)
        for node in reversed(self.nodes[stop : root.id + 1]):
            g = cot.get(node.id)
            if g is None or not node.parents or not node.requires_grad or node.id in targets:
                continue
            parents = [self.nodes[p] for p in node.parents]
            grads = PRIMITIVES[node.op].backward(
                g, [p.value for p in parents], node.value, node.attrs
            )
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.id in cot:
                    cot[p.id] = cot[p.id] + pg
                else:
                    cot[p.id] = pg
        return cot

    def backward(self, root: Node) -> None:
        cot = self.gradients(root)
        for nid, g in cot.items():
            node = self.nodes[nid]
            if not node.requires_grad:
                continue
            if node._grad is None:
                node._grad = np.array(g, dtype=np.float64, copy=True)
            else:
                node._grad = node._grad + g

    def zero_grad(self) -> None:
        for node in self.nodes:
            node._grad = None

    def replay(self) -> list[np.ndarray]:
        """Recompute every non-leaf value from the stored leaves."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.value)
            else:
                prim = PRIMITIVES[node.op]
                values.append(
                    np.asarray(prim.forward([values[p] for p in node.parents], node.attrs), dtype=np.float64)
                )
        return values


def backward(root: Node) -> None:
    root.tape.backward(root)


def grad_of(node: Node) -> np.ndarray:
    return np.array(node.grad, copy=True)


def apply(op_kind: str, inputs: Sequence[Node], **attrs) -> Node:
    if not inputs:
        raise ValueError(f"{op_kind}: needs at least one input")
    return inputs[0].tape.apply(op_kind, inputs, **attrs)


# ---------------------------------------------------------------- checks


def _same_or_scalar(op, values, attrs):
    a, b = values
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_matmul(op, values, attrs):
    a, b = values
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"{op}: cannot multiply {a.shape} by {b.shape}")


def _check_bias(op, values, attrs):
    a, b = values
    if a.ndim != 2 or b.shape != (a.shape[1],):
        raise ShapeError(f"{op}: bias {b.shape} does not match rows of {a.shape}")


def _check_concat(op, values, attrs):
    axis = attrs.get("axis", 0)
    ref = values[0].shape
    for v in values[1:]:
        if v.ndim != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(v.shape, ref)) if k != axis % len(ref)
        ):
            raise ShapeError(f"{op}: shape mismatch {ref} vs {v.shape} along axis {axis}")


def _check_stack(op, values, attrs):
    ref = values[0].shape
    for v in values[1:]:
        if v.shape != ref:
            raise ShapeError(f"{op}: shape mismatch {ref} vs {v.shape}")


def _unbroadcast(g, shape):
    if shape == () and g.shape != ():
        return np.sum(g)
    return g


# ---------------------------------------------------------------- primitives


@primitive("add", check=_same_or_scalar)
def _add():
    def fwd(v, a):
        return v[0] + v[1]

    def bwd(g, v, out, a):
        return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)

    return fwd, bwd


@primitive("sub", check=_same_or_scalar)
def _sub():
    def fwd(v, a):
        return v[0] - v[1]

    def bwd(g, v, out, a):
        return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)

    return fwd, bwd


@primitive("mul", check=_same_or_scalar)
def _mul():
    def fwd(v, a):
        return v[0] * v[1]

    def bwd(g, v, out, a):
        return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)

    return fwd, bwd


@primitive("scale")
def _scale():
    def fwd(v, a):
        return v[0] * a["c"]

    def bwd(g, v, out, a):
        return (g * a["c"],)

    return fwd, bwd


@primitive("matmul", check=_check_matmul)
def _matmul():
    def fwd(v, a):
        return v[0] @ v[1]

    def bwd(g, v, out, a):
        return g @ v[1].T, v[0].T @ g

    return fwd, bwd


@primitive("add_bias", check=_check_bias)
def _add_bias():
    def fwd(v, a):
        return v[0] + v[1]

    def bwd(g, v, out, a):
        return g, g.sum(axis=0)

    return fwd, bwd


@primitive("exp")
def _exp():
    def fwd(v, a):
        return np.exp(v[0])

    def bwd(g, v, out, a):
        return (g * out,)

    return fwd, bwd


@primitive("log")
def _log():
    # Clamped entries carry zero derivative; the clamp is a documented kink.
    def fwd(v, a):
        return np.log(np.maximum(v[0], LOG_FLOOR))

    def bwd(g, v, out, a):
        x = v[0]
        return (np.where(x > LOG_FLOOR, g / np.maximum(x, LOG_FLOOR), 0.0),)

    return fwd, bwd


@primitive("tanh")
def _tanh():
    def fwd(v, a):
        return np.tanh(v[0])

    def bwd(g, v, out, a):
        return (g * (1.0 - out * out),)

    return fwd, bwd


@primitive("relu")
def _relu():
    def fwd(v, a):
        return np.maximum(v[0], 0.0)

    def bwd(g, v, out, a):
        return (g * (v[0] > 0.0),)

    return fwd, bwd


@primitive("sqrt")
def _sqrt():
    def fwd(v, a):
        return np.sqrt(v[0])

    def bwd(g, v, out, a):
        return (g * 0.5 / out,)

    return fwd, bwd


@primitive("square")
def _square():
    def fwd(v, a):
        return v[0] * v[0]

    def bwd(g, v, out, a):
        return (2.0 * g * v[0],)

    return fwd, bwd


@primitive("softmax")
def _softmax():
    def fwd(v, a):
        z = v[0] - np.max(v[0], axis=-1, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g, v, out, a):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return fwd, bwd


@primitive("sum")
def _sum():
    def fwd(v, a):
        return np.sum(v[0], axis=a.get("axis"))

    def bwd(g, v, out, a):
        axis = a.get("axis")
        if axis is None:
            return (np.broadcast_to(g, v[0].shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), v[0].shape).copy(),)

    return fwd, bwd


@primitive("mean")
def _mean():
    def fwd(v, a):
        return np.mean(v[0], axis=a.get("axis"))

    def bwd(g, v, out, a):
        axis = a.get("axis")
        x = v[0]
        if axis is None:
            return (np.full(x.shape, g / x.size),)
        n = x.shape[axis]
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return fwd, bwd


@primitive("take")
def _take():
    # Basic (non-fancy) indexing only, so the backward is a scatter into zeros.
    def fwd(v, a):
        return v[0][a["index"]]

    def bwd(g, v, out, a):
        full = np.zeros_like(v[0])
        full[a["index"]] = g
        return (full,)

    return fwd, bwd


@primitive("concat", check=_check_concat)
def _concat():
    def fwd(v, a):
        return np.concatenate(v, axis=a.get("axis", 0))

    def bwd(g, v, out, a):
        axis = a.get("axis", 0)
        cuts = np.cumsum([x.shape[axis] for x in v])[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    return fwd, bwd


@primitive("stack", check=_check_stack)
def _stack():
    def fwd(v, a):
        return np.stack(v, axis=0)

    def bwd(g, v, out, a):
        return tuple(g[k] for k in range(len(v)))

    return fwd, bwd


@primitive("transpose")
def _transpose():
    def fwd(v, a):
        return np.transpose(v[0], a.get("axes"))

    def bwd(g, v, out, a):
        axes = a.get("axes")
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)

    return fwd, bwd


@primitive("reshape")
def _reshape():
    def fwd(v, a):
        return np.reshape(v[0], a["shape"])

    def bwd(g, v, out, a):
        return (np.reshape(g, v[0].shape),)

    return fwd, bwd


@primitive("l2norm")
def _l2norm():
    def fwd(v, a):
        return np.sqrt(np.sum(v[0] * v[0]))

    def bwd(g, v, out, a):
        if out == 0.0:
            return (np.zeros_like(v[0]),)
        return (g * v[0] / out,)

    return fwd, bwd


@primitive("layernorm")
def _layernorm():
    # Normalizes the last axis; no affine parameters.
    def fwd(v, a):
        x = v[0]
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + LN_EPS)

    def bwd(g, v, out, a):
        x = v[0]
        n = x.shape[-1]
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return fwd, bwd


@primitive("straight_through")
def _straight_through():
    # Forward emits the one-hot argmax of each row; backward is the identity.
    def fwd(v, a):
        x = v[0]
        hard = np.zeros_like(x)
        np.put_along_axis(hard, np.argmax(x, axis=-1)[..., None], 1.0, axis=-1)
        return hard

    def bwd(g, v, out, a):
        return (g,)

    return fwd, bwd


# ---------------------------------------------------------------- wrappers


def add(a, b):
    return apply("add", [a, b])


def sub(a, b):
    return apply("sub", [a, b])


def mul(a, b):
    return apply("mul", [a, b])


def scale(a, c: float):
    return apply("scale", [a], c=float(c))


def matmul(a, b):
    return apply("matmul", [a, b])


def add_bias(a, b):
    return apply("add_bias", [a, b])


def exp(a):
    return apply("exp", [a])


def log(a):
    return apply("log", [a])


def tanh(a):
    return apply("tanh", [a])


def relu(a):
    return apply("relu", [a])


def sqrt(a):
    return apply("sqrt", [a])


def square(a):
    return apply("square", [a])


def softmax(a):
    return apply("softmax", [a])


def sum(a, axis=None):  # noqa: A001
    return apply("sum", [a], axis=axis)


def mean(a, axis=None):
    return apply("mean", [a], axis=axis)


def take(a, index):
    return apply("take", [a], index=index)


def concat(nodes, axis=0):
    return apply("concat", list(nodes), axis=axis)


def stack(nodes):
    return apply("stack", list(nodes))


def transpose(a, axes=None):
    return apply("transpose", [a], axes=None if axes is None else tuple(axes))


def reshape(a, shape):
    return apply("reshape", [a], shape=tuple(shape))


def l2norm(a):
    return apply("l2norm", [a])


def layernorm(a):
    return apply("layernorm", [a])


def straight_through(a):
    return apply("straight_through", [a])


# ---------------------------------------------------------------- checking


@dataclass
class ParamCheck:
    index: int
    shape: tuple
    max_rel_error: float
    passed: bool
    nonsmooth: bool = False
    nonfinite: bool = False


@dataclass
class FiniteDiffReport:
    params: list[ParamCheck] = field(default_factory=list)
    tol: float = 1e-4
    h: float = 1e-5

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def nonsmooth(self) -> bool:
        return any(p.nonsmooth for p in self.params)


REL_FLOOR = 1e-6


def finite_diff_check(
    f: Callable[[Tape, list[Node]], Node],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> FiniteDiffReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f(tape, leaves)`` must build a scalar on ``tape`` from the supplied
    leaves and be deterministic. The relative error of each entry is
    ``|a - n| / max(|a|, |n|, REL_FLOOR)``. A parameter whose perturbation
    moves some log input across the clamp floor is flagged ``nonsmooth``
    instead of being judged.
    """
    params = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(values):
        tape = Tape()
        leaves = [tape.leaf(v) for v in values]
        with np.errstate(all="ignore"):
            root = f(tape, leaves)
        return tape, leaves, root

    report = FiniteDiffReport(tol=tol, h=h)
    tape, leaves, root = evaluate(params)
    base_clamps = tape.clamp_events
    base_finite = np.isfinite(root.value)
    analytic = None
    if base_finite:
        try:
            tape.backward(root)
            analytic = [grad_of(x) for x in leaves]
        except FloatingPointError:
            analytic = None

    for k, p in enumerate(params):
        if analytic is None or not np.all(np.isfinite(analytic[k])):
            report.params.append(ParamCheck(k, p.shape, float("inf"), False, nonfinite=True))
            continue
        numeric = np.zeros_like(p)
        nonsmooth = False
        nonfinite = False
        for idx in np.ndindex(p.shape):
            vals = []
            for sign in (1.0, -1.0):
                shifted = [q.copy() for q in params]
                shifted[k][idx] += sign * h
                t, _, r = evaluate(shifted)
                if t.clamp_events != base_clamps:
                    nonsmooth = True
                if not np.isfinite(r.value):
                    nonfinite = True
                vals.append(float(r.value))
            numeric[idx] = (vals[0] - vals[1]) / (2.0 * h)
        a = analytic[k]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), REL_FLOOR)
        err = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
        if nonfinite:
            report.params.append(ParamCheck(k, p.shape, float("inf"), False, nonfinite=True))
        else:
            report.params.append(
                ParamCheck(k, p.shape, err, (err < tol) and not nonsmooth, nonsmooth=nonsmooth)
            )
    return report
