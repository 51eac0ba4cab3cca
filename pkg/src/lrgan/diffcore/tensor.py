"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is define-by-run: every differentiable operation appends a node
to the active Graph as it executes, so execution order is already a valid
topological order and backward() simply walks the tape in reverse. Graphs
are cheap and are rebuilt every forward pass; training code calls
``reset_graph()`` once per optimization phase.

Training runs in float32. Gradient checking needs float64, which callers
get by constructing float64 tensors (or via ``default_dtype``).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class GraphError(RuntimeError):
    """Backward misuse: non-scalar loss, detached graph, repeated backward."""


class DimensionError(ValueError):
    """Shape mismatch between operands; message names the offending axis."""


_DEFAULT_DTYPE = np.dtype(np.float32)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dt}")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class default_dtype_ctx:
    """Temporarily switch the default dtype (used by the gradient-check suite)."""

    def __init__(self, dtype):
        self._dtype = dtype
        self._saved = None

    def __enter__(self):
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


class Node:
    """One executed operation: output tensor, parent tensors, backward rule."""

    __slots__ = ("out", "parents", "backward_fn", "graph")

    def __init__(self, out, parents, backward_fn, graph):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.graph = graph


class Graph:
    """Ordered tape of the operations executed during one forward pass."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE_GRAPH = Graph()
_GRAD_ENABLED = True


def active_graph() -> Graph:
    return _ACTIVE_GRAPH


def reset_graph() -> None:
    """Drop the current tape; the next recorded op starts a fresh graph.

    Node/Tensor links form reference cycles, so they are severed here
    explicitly — plain refcounting then frees the captured forward buffers
    immediately instead of waiting for the cycle collector.
    """
    global _ACTIVE_GRAPH
    old = _ACTIVE_GRAPH
    _ACTIVE_GRAPH = Graph()
    for node in old.nodes:
        node.out._node = None
        node.out.grad = None
        node.parents = ()
        node.backward_fn = None
        node.graph = None
    old.nodes.clear()


class no_grad:
    """Context manager that disables tape recording (sampling / evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(_DEFAULT_DTYPE)
    return arr


class Tensor:
    """Dense float array with an optional gradient buffer.

    ``grad`` is populated by ``backward()`` for every tensor on the path to
    the loss that has ``requires_grad``; it accumulates across backward
    calls until explicitly cleared (optimizers set it to None).
    """

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        head = np.array2string(self.data, precision=4, threshold=8)
        return f"Tensor({head}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar (implementations live in this module, below) ---------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable tensor. ``name`` is the dotted path assigned at registration."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _DEFAULT_DTYPE))


def make_op(out_data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]) -> Tensor:
    """Create an op output, recording it on the active graph when needed.

    ``backward_fn`` receives the output gradient and returns one gradient
    array (or None) per parent, in order.
    """
    needs_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        node = Node(out, tuple(parents), backward_fn, _ACTIVE_GRAPH)
        out._node = node
        _ACTIVE_GRAPH.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss over the active graph.

    Gradients accumulate into every reachable tensor with requires_grad.
    A second backward on the same graph raises; call reset_graph() between
    optimization phases.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or not loss.requires_grad:
        raise GraphError("loss is detached from the graph (no recorded operations)")
    graph = node.graph
    if graph is not _ACTIVE_GRAPH:
        raise GraphError("loss belongs to a stale graph; it was reset since the forward pass")
    if graph.consumed:
        raise GraphError("graph already consumed by a previous backward; call reset_graph()")
    graph.consumed = True

    loss.grad = np.ones_like(loss.data)
    for nd in reversed(graph.nodes):
        out_grad = nd.out.grad
        if out_grad is None:
            continue  # not reachable from the loss
        grads = nd.backward_fn(out_grad)
        for parent, g in zip(nd.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.dtype != parent.data.dtype:
                g = g.astype(parent.data.dtype)
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op(out, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_op(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return make_op(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through the unclipped region."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)
    return make_op(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = a.data * mask
    return make_op(out, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    neg_mask = a.data < 0
    out = a.data.copy()
    out[neg_mask] *= slope

    def bw(g):
        gx = g.copy()
        gx[neg_mask] *= slope
        return (gx,)

    return make_op(out, (a,), bw)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # numerically stable two-sided form
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow for large |x|."""
    a = _as_tensor(a)
    out = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = np.empty_like(a.data)
    pos = a.data >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    sig[~pos] = ez / (1.0 + ez)
    return make_op(out, (a,), lambda g: (g * sig,))


_NONLINEARITIES = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def nonlinearity(a, kind: str) -> Tensor:
    try:
        fn = _NONLINEARITIES[kind]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {kind!r}; expected one of {sorted(_NONLINEARITIES)}")
    return fn(a)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype, copy=False),)

    return make_op(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.shape).astype(a.dtype, copy=False),)

    return make_op(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),))


def take(a, index) -> Tensor:
    """Basic slicing/indexing with gradient scatter-add into the source."""
    a = _as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_op(np.ascontiguousarray(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return grads

    return make_op(out, tensors, bw)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner axes disagree: axis 1 of left is {a.shape[1]}, axis 0 of right is {b.shape[0]}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return make_op(out, (a, b), bw)


def constant(data, dtype=None) -> Tensor:
    """Non-trainable tensor wrapping fixed data (meshes, targets, labels)."""
    return Tensor(np.asarray(data), requires_grad=False, dtype=dtype)
