"""Dense float64 tensors and a reverse-mode automatic differentiation core.

Every numeric array in the package is a C-contiguous float64 numpy array
("tensor"), at most 4-D, with (batch, channel, height, width) axis order
for 4-D data.  A :class:`Node` wraps one tensor into a dynamically built
computation graph; :func:`backward` on a scalar root accumulates adjoints
by addition into every reachable node that requires gradients, then frees
the graph.

A single graph must be driven by one thread at a time; distinct graphs are
independent.  There is no global state -- randomness always enters through
an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, FormatError

LOG_CLAMP = 1e-12  # floor for log() so cross-entropy survives saturated sigmoids


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (the package-wide tensor type)."""
    return np.ascontiguousarray(x, dtype=np.float64)


class Node:
    """A tensor participating in a differentiable computation graph.

    ``value`` holds the forward result, ``grad`` the accumulated adjoint
    (same shape, zero until backward reaches it).  ``parents`` plus the
    registered backward rule form an acyclic graph built fresh on every
    forward pass.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = as_tensor(value)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @staticmethod
    def _op(value: np.ndarray, parents: Sequence["Node"],
            backward: Callable[[np.ndarray], None]) -> "Node":
        out = Node.__new__(Node)
        out.value = value
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = np.zeros_like(value) if out.requires_grad else None
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.requires_grad:
            self.grad += g

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are promoted on the fly.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _lift(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_value(a: Node, b: Node, op) -> np.ndarray:
    try:
        return op(a.value, b.value)
    except ValueError as exc:
        raise DimensionError(
            f"shapes {a.value.shape} and {b.value.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    value = _broadcast_value(a, b, np.add)

    def backward(g):
        a.accumulate(_unbroadcast(g, a.value.shape))
        b.accumulate(_unbroadcast(g, b.value.shape))

    return Node._op(value, (a, b), backward)


def sub(a: Node, b: Node) -> Node:
    value = _broadcast_value(a, b, np.subtract)

    def backward(g):
        a.accumulate(_unbroadcast(g, a.value.shape))
        b.accumulate(_unbroadcast(-g, b.value.shape))

    return Node._op(value, (a, b), backward)


def mul(a: Node, b: Node) -> Node:
    value = _broadcast_value(a, b, np.multiply)

    def backward(g):
        a.accumulate(_unbroadcast(g * b.value, a.value.shape))
        b.accumulate(_unbroadcast(g * a.value, b.value.shape))

    return Node._op(value, (a, b), backward)


def div(a: Node, b: Node) -> Node:
    value = _broadcast_value(a, b, np.divide)

    def backward(g):
        a.accumulate(_unbroadcast(g / b.value, a.value.shape))
        b.accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return Node._op(value, (a, b), backward)


def scalar_mul(a: Node, s: float) -> Node:
    def backward(g):
        a.accumulate(g * s)

    return Node._op(a.value * s, (a,), backward)


def exp(a: Node) -> Node:
    value = np.exp(a.value)

    def backward(g):
        a.accumulate(g * value)

    return Node._op(value, (a,), backward)


def log(a: Node) -> Node:
    """Natural log, clamped below at LOG_CLAMP; zero gradient where clamped."""
    clamped = np.maximum(a.value, LOG_CLAMP)
    value = np.log(clamped)

    def backward(g):
        a.accumulate(np.where(a.value > LOG_CLAMP, g / clamped, 0.0))

    return Node._op(value, (a,), backward)


def sigmoid(a: Node) -> Node:
    value = 1.0 / (1.0 + np.exp(-a.value))

    def backward(g):
        a.accumulate(g * value * (1.0 - value))

    return Node._op(value, (a,), backward)


def elu(a: Node, alpha: float = 1.0) -> Node:
    neg = alpha * np.expm1(np.minimum(a.value, 0.0))
    value = np.where(a.value > 0.0, a.value, neg)

    def backward(g):
        a.accumulate(g * np.where(a.value > 0.0, 1.0, neg + alpha))

    return Node._op(value, (a,), backward)


def relu(a: Node) -> Node:
    value = np.maximum(a.value, 0.0)

    def backward(g):
        a.accumulate(g * (a.value > 0.0))

    return Node._op(value, (a,), backward)


def reshape(a: Node, shape) -> Node:
    value = a.value.reshape(shape)

    def backward(g):
        a.accumulate(g.reshape(a.value.shape))

    return Node._op(value, (a,), backward)


def absolute(a: Node) -> Node:
    value = np.abs(a.value)

    def backward(g):
        a.accumulate(g * np.sign(a.value))

    return Node._op(value, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def reduce_sum(a: Node, axes=None, keepdims: bool = False) -> Node:
    value = a.value.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        a.accumulate(np.broadcast_to(g, a.value.shape))

    return Node._op(np.asarray(value), (a,), backward)


def reduce_mean(a: Node, axes=None, keepdims: bool = False) -> Node:
    if axes is None:
        count = a.value.size
    else:
        ax = (axes,) if isinstance(axes, int) else axes
        count = int(np.prod([a.value.shape[i] for i in ax]))
    return scalar_mul(reduce_sum(a, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(root: Node) -> None:
    """Reverse-topological adjoint accumulation from a scalar root.

    Visits each node exactly once and frees the graph afterwards, so a
    fresh forward pass is needed before differentiating again.
    """
    if root.value.size != 1:
        raise ContractError(f"backward root must be scalar-shaped, got {root.value.shape}")
    if not root.requires_grad:
        return

    order: list[Node] = []
    seen = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# Tensor serialization: magic "RTFT", u8 version, u8 rank, LE u32 extents,
# then the raw little-endian float64 payload.
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"RTFT"
TENSOR_VERSION = 1


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = as_tensor(arr)
    if arr.ndim > 4:
        raise FormatError(f"rank {arr.ndim} exceeds the 4-D tensor limit")
    header = TENSOR_MAGIC + struct.pack("<BB", TENSOR_VERSION, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + extents + arr.astype("<f8").tobytes()


def tensor_from_bytes(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one serialized tensor; returns (array, next offset)."""
    if data[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = struct.unpack_from("<BB", data, offset + 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    pos = offset + 6
    shape = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = pos + 8 * count
    if end > len(data):
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(data[pos:end], dtype="<f8").reshape(shape).copy()
    return arr, end


def save_tensor(arr: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return arr


Scalar = Union[int, float]
