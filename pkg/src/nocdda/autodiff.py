"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every operation appends a :class:`Node` to the tape owned by its inputs.
:meth:`Tape.backward` walks the tape in reverse creation order, which is a
valid reverse topological order because a node can only depend on nodes
created before it.
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray
VJP = Callable[[Array], tuple]


class DetachedLeafWarning(UserWarning):
    """Raised (as a warning) when a requested leaf does not influence the loss."""


class NonScalarLossError(ValueError):
    pass


class Node:
    __slots__ = ("value", "parents", "vjp", "tape", "index", "op")

    def __init__(self, value: Array, parents: tuple = (), vjp: VJP | None = None,
                 tape: "Tape | None" = None, op: str = "leaf"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.tape = tape
        self.op = op
        self.index = -1
        if tape is not None:
            tape._record(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.value.shape})"


class Tape:
    """Records nodes in creation order for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _record(self, node: Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def leaf(self, value, name: str = "leaf") -> Node:
        return Node(np.asarray(value, dtype=np.float64), tape=self, op=name)

    def constant(self, value) -> Node:
        # constants are not recorded; gradients never flow into them
        return Node(np.asarray(value, dtype=np.float64), op="const")

    def backward(self, loss: Node, wrt: Sequence[Node]) -> list[Array]:
        """Gradients of the scalar ``loss`` with respect to each node in ``wrt``.

        Leaves that the loss does not depend on get a zero gradient and a
        :class:`DetachedLeafWarning`.
        """
        if loss.value.size != 1:
            raise NonScalarLossError(f"loss must be scalar, got shape {loss.value.shape}")
        if loss.tape is not self:
            raise ValueError("loss node was not recorded on this tape")
        grads: dict[int, Array] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.get(node.index)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent.tape is not self or pg is None:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        out = []
        for leaf in wrt:
            g = grads.get(leaf.index) if leaf.tape is self else None
            if g is None:
                warnings.warn(f"{leaf!r} is detached from the loss; gradient is zero",
                              DetachedLeafWarning, stacklevel=2)
                g = np.zeros_like(leaf.value)
            out.append(g)
        return out


def backward(loss: Node, wrt: Sequence[Node]) -> list[Array]:
    if loss.tape is None:
        raise ValueError("loss node carries no tape")
    return loss.tape.backward(loss, wrt)


def _lift(x, tape: Tape | None) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=np.float64), op="const")


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Node) and x.tape is not None:
            return x.tape
    return None


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value: Array, parents: tuple, vjp: VJP, op: str) -> Node:
    tape = _tape_of(*parents)
    return Node(value, parents, vjp, tape, op)


def add(a, b) -> Node:
    a, b = _lift(a, None), _lift(b, None)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = _lift(a, None), _lift(b, None)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = _lift(a, None), _lift(b, None)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Node:
    a, b = _lift(a, None), _lift(b, None)
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def linear(x: Node, w: Node, b: Node) -> Node:
    """``x @ w.T + b`` for a batch ``x`` of shape (n, in)."""
    xv, wv = x.value, w.value
    value = xv @ wv.T + b.value
    return _make(value, (x, w, b), lambda g: (g @ wv, g.T @ xv, g.sum(axis=0)), "linear")


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Node) -> Node:
    y = _sigmoid(a.value)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(a: Node) -> Node:
    """log(1 + exp(a)), computed without overflow."""
    v = a.value
    y = np.logaddexp(0.0, v)
    s = _sigmoid(v)
    return _make(y, (a,), lambda g: (g * s,), "softplus")


def square(a: Node) -> Node:
    v = a.value
    return _make(v * v, (a,), lambda g: (2.0 * v * g,), "square")


def log_softmax(a: Node) -> Node:
    """Row-wise log-softmax over the last axis."""
    v = a.value
    shifted = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _make(y, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def softmax(a: Node) -> Node:
    p = softmax_array(a.value)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), vjp, "softmax")


def clamp_min(a: Node, floor: float) -> Node:
    mask = a.value >= floor
    return _make(np.where(mask, a.value, floor), (a,), lambda g: (g * mask,), "clamp_min")


def total(a: Node) -> Node:
    shape = a.value.shape
    return _make(np.asarray(a.value.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Node) -> Node:
    shape, n = a.value.shape, a.value.size
    return _make(np.asarray(a.value.mean()), (a,),
                 lambda g: (np.full(shape, float(g) / n),), "mean")


def row_sum(a: Node) -> Node:
    return _make(a.value.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], a.value.shape[1], axis=1),),
                 "row_sum")


def concat(parts: Sequence, axis: int = 1) -> Node:
    nodes = tuple(_lift(p, None) for p in parts)
    sizes = [n.value.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    return _make(value, nodes, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def outer_rows(f: Node, y: Node) -> Node:
    """Per-row outer product ``f_i y_i^T`` flattened row-major: (n, a), (n, b) -> (n, a*b)."""
    fv, yv = f.value, y.value
    n, a = fv.shape
    b = yv.shape[1]
    value = (fv[:, :, None] * yv[:, None, :]).reshape(n, a * b)

    def vjp(g):
        g3 = g.reshape(n, a, b)
        return (np.einsum("nab,nb->na", g3, yv), np.einsum("nab,na->nb", g3, fv))

    return _make(value, (f, y), vjp, "outer_rows")


def _sigmoid(v: Array) -> Array:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax_array(v: Array) -> Array:
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid_array(v: Array) -> Array:
    return _sigmoid(np.asarray(v, dtype=np.float64))
