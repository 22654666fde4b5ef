"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever at least
one input is tracked (a ``requires_grad`` leaf or the output of an earlier
recorded node). Outside a tape everything evaluates eagerly with no graph.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(tape, loss)[w]
    array([2., 2., 2.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []


class Tensor:
    """A contiguous float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node: tuple[Tape, int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.ndim(x) == 0 and like is not None:
        return Tensor(np.full(like.shape, float(x)))
    return Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    params: dict[str, Any] = field(default_factory=dict)
    vjp: Callable | None = None
    leaf: Tensor | None = None


class Tape:
    """Ordered record of the operations evaluated while the tape is active.

    Nodes are appended as operations execute, so every node's inputs precede
    it. A tensor is tracked on at most one tape at a time.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def node_id(self, t: Tensor) -> int | None:
        if t._node is not None and t._node[0] is self:
            return t._node[1]
        return None

    def _track(self, t: Tensor) -> int | None:
        nid = self.node_id(t)
        if nid is None and t.requires_grad:
            self.nodes.append(Node("leaf", (), t.shape, leaf=t))
            nid = len(self.nodes) - 1
            t._node = (self, nid)
        return nid

    def release(self) -> None:
        """Drop all recorded nodes and detach leaves, freeing saved activations.

        Training loops call this after the backward sweep; nodes hold closures
        over large intermediate arrays that would otherwise wait for the
        cyclic garbage collector.
        """
        for n in self.nodes:
            if n.leaf is not None and n.leaf._node is not None and n.leaf._node[0] is self:
                n.leaf._node = None
        self.nodes = []

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        grads = backward(self, loss)
        return [grads.get(t, np.zeros(t.shape)) for t in wrt]


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable,
           **params) -> Tensor:
    """Wrap ``out`` as a tensor, recording a node if any input is tracked.

    ``vjp(g, needs)`` receives the output cotangent and a tuple of booleans
    naming which inputs want a gradient; it returns one array (or ``None``)
    per input.
    """
    result = Tensor(out)
    tape = active_tape()
    if tape is None:
        return result
    ids = tuple(tape._track(t) for t in inputs)
    if all(i is None for i in ids):
        return result
    tape.nodes.append(Node(kind, tuple(-1 if i is None else i for i in ids),
                           result.shape, params, vjp))
    result._node = (tape, len(tape.nodes) - 1)
    return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Returns the gradient for every leaf recorded on the tape; leaves that do
    not influence ``loss`` get zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    root = tape.node_id(loss)
    leaves = {n.leaf: np.zeros(n.shape) for n in tape.nodes if n.kind == "leaf"}
    if root is None:
        return leaves
    # which nodes lie on a path from a leaf (cheap forward pass over ids)
    live = [False] * len(tape.nodes)
    for i, n in enumerate(tape.nodes):
        live[i] = n.kind == "leaf" or any(j >= 0 and live[j] for j in n.inputs)
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root] = np.ones(tape.nodes[root].shape)
    for i in range(root, -1, -1):
        g = grads[i]
        n = tape.nodes[i]
        if g is None:
            continue
        if n.kind == "leaf":
            leaves[n.leaf] = g
            continue
        needs = tuple(j >= 0 and live[j] for j in n.inputs)
        in_grads = n.vjp(g, needs)
        for j, need, gi in zip(n.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            grads[j] = gi if grads[j] is None else grads[j] + gi
        grads[i] = None
    return leaves


# elementwise and reduction primitives -------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return record("add_scalar", [a], a.data + c, lambda g, n: (g,), value=c)
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same(a, b, "add")
    return record("add", [a, b], a.data + b.data, lambda g, n: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return record("sub", [a, b], a.data - b.data, lambda g, n: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return record("scale", [a], a.data * c, lambda g, n: (g * c,), value=c)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", [a, b], ad * bd,
                  lambda g, n: (g * bd if n[0] else None, g * ad if n[1] else None))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", [a], np.asarray(a.data.sum()).reshape(()),
                  lambda g, n: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, size = a.shape, a.size
    return record("mean", [a], np.asarray(a.data.mean()).reshape(()),
                  lambda g, n: (np.broadcast_to(g / size, shape).copy(),))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return record("abs", [a], np.abs(a.data), lambda g, n: (g * s,))


def square(a: Tensor) -> Tensor:
    d = a.data
    return record("square", [a], d * d, lambda g, n: (2.0 * g * d,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record("tanh", [a], y, lambda g, n: (g * (1.0 - y * y),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    s = sigmoid_np(x.data)
    xd = x.data
    return record("silu", [x], xd * s, lambda g, n: (g * s * (1.0 + xd * (1.0 - s)),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return record("reshape", [a], a.data.reshape(shape),
                  lambda g, n: (g.reshape(src),), shape=tuple(shape))


def linear_map(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray], kind: str = "linear_map",
               **params) -> Tensor:
    """Apply a fixed linear operator with a known adjoint as one tape node."""
    return record(kind, [x], forward(x.data), lambda g, n: (adjoint(g),), **params)
