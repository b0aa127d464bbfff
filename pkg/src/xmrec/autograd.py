"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every op records the node it produced: op kind, parent tensors, a replay
closure (`_forward`, reads the parents' *current* values) and a gradient
closure (`_backward`, uses arrays captured at construction time). A `Graph`
snapshot of the tape supports deterministic recomputation -- which is what
the finite-difference oracles in the test suite rely on: replace a leaf's
`values` array (never mutate it in place) and call `graph.forward()`.

Training runs in float32; the engine preserves float64 inputs so gradient
checks can run at full precision.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

_node_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(values, dtype=None):
    arr = np.asarray(values)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return arr


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("values", "grad", "requires_grad", "op", "parents",
                 "node_id", "name", "_backward", "_forward")

    def __init__(self, values, requires_grad=False, op="leaf", parents=(),
                 name=None):
        self.values = _as_array(values)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self.node_id = next(_node_counter)
        self.name = name
        self._backward = None
        self._forward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def label(self):
        return self.name or f"{self.op}#{self.node_id}"

    def __repr__(self):
        return f"Tensor({self.label}, shape={self.values.shape})"

    def item(self):
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(Graph(self))


def _make_node(op, parents, values, forward_fn, backward_fn):
    """Create an op node; skips all recording when grads are disabled."""
    if not _grad_enabled:
        return Tensor(values, op=op)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=requires, op=op, parents=parents)
    out._forward = forward_fn
    if requires:
        out._backward = backward_fn
    return out


def _accumulate(parent: Tensor, grad: np.ndarray):
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = grad.astype(parent.values.dtype, copy=True)
    else:
        parent.grad += grad


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """Topologically ordered snapshot of the nodes reachable from a root."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._topo(root)

    @staticmethod
    def _topo(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node.parents:
                if parent.node_id not in seen:
                    stack.append((parent, False))
        return order

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.parents]

    def forward(self) -> Tensor:
        """Recompute every non-leaf value from the leaves' current values."""
        for node in self.nodes:
            if node._forward is not None:
                node.values = node._forward()
        return self.root


def forward(graph: Graph) -> Tensor:
    return graph.forward()


def backward(graph: Graph) -> dict[Tensor, np.ndarray]:
    """Populate `.grad` for every reachable node that requires grad.

    Returns a map from those nodes to their gradients (zeros when a node is
    cut off by stop-gradient). The root must be scalar.
    """
    root = graph.root
    if root.values.size != 1:
        raise ShapeError(
            f"backward requires a scalar loss, got shape {root.values.shape} "
            f"at node '{root.label}'")
    for node in graph.nodes:
        node.grad = None
    root.grad = np.ones_like(root.values)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    grads = {}
    for node in graph.nodes:
        if node.requires_grad:
            grads[node] = node.grad if node.grad is not None \
                else np.zeros_like(node.values)
    return grads


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError(
            f"add: cannot broadcast shapes {a.values.shape} and "
            f"{b.values.shape} (nodes '{a.label}', '{b.label}')") from None
    a_shape, b_shape = a.values.shape, b.values.shape

    def fwd():
        return a.values + b.values

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a_shape))
        _accumulate(b, _unbroadcast(g, b_shape))

    return _make_node("add", (a, b), values, fwd, bwd)


def neg(a: Tensor) -> Tensor:
    def fwd():
        return -a.values

    def bwd(g):
        _accumulate(a, -g)

    return _make_node("neg", (a,), -a.values, fwd, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError(
            f"mul: cannot broadcast shapes {a.values.shape} and "
            f"{b.values.shape} (nodes '{a.label}', '{b.label}')") from None
    a_vals, b_vals = a.values, b.values
    a_shape, b_shape = a_vals.shape, b_vals.shape

    def fwd():
        return a.values * b.values

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b_vals, a_shape))
        _accumulate(b, _unbroadcast(g * a_vals, b_shape))

    return _make_node("mul", (a, b), values, fwd, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def fwd():
        return a.values * s

    def bwd(g):
        _accumulate(a, g * s)

    return _make_node("scale", (a,), a.values * s, fwd, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(
            f"matmul: operands need >=2 dims, got {a.values.shape} and "
            f"{b.values.shape} (nodes '{a.label}', '{b.label}')")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.values.shape} @ {b.values.shape} "
            f"(nodes '{a.label}', '{b.label}')")
    values = a.values @ b.values
    a_vals, b_vals = a.values, b.values
    a_shape, b_shape = a_vals.shape, b_vals.shape

    def fwd():
        return a.values @ b.values

    def bwd(g):
        ga = g @ np.swapaxes(b_vals, -1, -2)
        gb = np.swapaxes(a_vals, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a_shape))
        _accumulate(b, _unbroadcast(gb, b_shape))

    return _make_node("matmul", (a, b), values, fwd, bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0

    def fwd():
        return np.maximum(a.values, 0)

    def bwd(g):
        _accumulate(a, g * mask)

    return _make_node("relu", (a,), np.maximum(a.values, 0), fwd, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.values.shape[-1]
    if gain.values.shape != (d,) or bias.values.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got "
            f"{gain.values.shape} and {bias.values.shape} (node '{x.label}')")

    def compute(xv, gv, bv):
        mu = xv.mean(axis=-1, keepdims=True)
        xc = xv - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xn = xc * inv
        return xn * gv + bv, xn, inv

    values, xn, inv = compute(x.values, gain.values, bias.values)

    def fwd():
        return compute(x.values, gain.values, bias.values)[0]

    def bwd(g):
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(bias, g.sum(axis=reduce_axes))
        _accumulate(gain, (g * xn).sum(axis=reduce_axes))
        if x.requires_grad:
            gxn = g * gain.values
            term = gxn - gxn.mean(axis=-1, keepdims=True) \
                - xn * np.mean(gxn * xn, axis=-1, keepdims=True)
            _accumulate(x, term * inv)

    return _make_node("layer_norm", (x, gain, bias), values, fwd, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    def compute(xv):
        shifted = xv - xv.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    y = compute(x.values)

    def fwd():
        return compute(x.values)

    def bwd(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make_node("softmax", (x,), y, fwd, bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted log-softmax; the mandated form for CE and InfoNCE."""
    def compute(xv):
        shifted = xv - xv.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return shifted - lse

    y = compute(x.values)
    p = np.exp(y)

    def fwd():
        return compute(x.values)

    def bwd(g):
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make_node("log_softmax", (x,), y, fwd, bwd)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup (embedding lookup): out[..., :] = table[idx[...], :]."""
    idx = np.asarray(idx)
    if table.values.ndim != 2:
        raise ShapeError(
            f"gather_rows: table must be 2-D, got {table.values.shape} "
            f"(node '{table.label}')")
    n_rows, dim = table.values.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError(
            f"gather_rows: index out of range [0, {n_rows}) "
            f"(node '{table.label}')")
    flat = idx.reshape(-1)

    def fwd():
        return table.values[idx]

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, flat, g.reshape(-1, dim))
        _accumulate(table, gt)

    return _make_node("gather_rows", (table,), table.values[idx], fwd, bwd)


def take_per_row(x: Tensor, idx) -> Tensor:
    """out[i] = x[i, idx[i]] for a 2-D input."""
    idx = np.asarray(idx)
    if x.values.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.values.shape[0]:
        raise ShapeError(
            f"take_per_row: need 2-D x and per-row index, got {x.values.shape} "
            f"and {idx.shape} (node '{x.label}')")
    rows = np.arange(x.values.shape[0])

    def fwd():
        return x.values[rows, idx]

    def bwd(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, (rows, idx), g)
        _accumulate(x, gx)

    return _make_node("take_per_row", (x,), x.values[rows, idx], fwd, bwd)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.values.shape

    def fwd():
        return np.sum(x.values, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, shape).copy())

    return _make_node("reduce_sum", (x,),
                      np.sum(x.values, axis=axis, keepdims=keepdims), fwd, bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.values.shape
    if axis is None:
        count = x.values.size
    else:
        count = shape[axis]

    def fwd():
        return np.mean(x.values, axis=axis, keepdims=keepdims)

    def bwd(g):
        g = g / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, shape).copy())

    return _make_node("reduce_mean", (x,),
                      np.mean(x.values, axis=axis, keepdims=keepdims), fwd, bwd)


def sumsq(x: Tensor, axis=None) -> Tensor:
    """Squared L2 norm: sum of x**2 over `axis` (all axes when None)."""
    x_vals = x.values

    def fwd():
        return np.sum(x.values * x.values, axis=axis)

    def bwd(g):
        if axis is None:
            _accumulate(x, 2.0 * x_vals * g)
            return
        _accumulate(x, 2.0 * x_vals * np.expand_dims(g, axis))

    return _make_node("sumsq", (x,), np.sum(x_vals * x_vals, axis=axis),
                      fwd, bwd)


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product along the last axis."""
    if a.values.shape != b.values.shape:
        raise ShapeError(
            f"rowwise_dot: shapes differ, {a.values.shape} vs {b.values.shape} "
            f"(nodes '{a.label}', '{b.label}')")
    a_vals, b_vals = a.values, b.values

    def fwd():
        return np.sum(a.values * b.values, axis=-1)

    def bwd(g):
        g = np.expand_dims(g, -1)
        _accumulate(a, g * b_vals)
        _accumulate(b, g * a_vals)

    return _make_node("rowwise_dot", (a, b),
                      np.sum(a_vals * b_vals, axis=-1), fwd, bwd)


def stop_gradient(x: Tensor) -> Tensor:
    # Replays its *captured* value: a stop-gradient node is a constant with
    # respect to differentiation, so graph replay (used by the one-sided
    # finite-difference checks) must hold it frozen.
    frozen = x.values.copy()
    out = _make_node("stop_gradient", (x,), frozen, lambda: frozen, None)
    out.requires_grad = False
    out._backward = None
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def fwd():
        return np.concatenate([t.values for t in tensors], axis=axis)

    def bwd(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _accumulate(t, g[tuple(sl)])

    return _make_node("concat", tensors,
                      np.concatenate([t.values for t in tensors], axis=axis),
                      fwd, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.values.shape

    def fwd():
        return x.values.reshape(shape)

    def bwd(g):
        _accumulate(x, g.reshape(old))

    return _make_node("reshape", (x,), x.values.reshape(shape), fwd, bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def fwd():
        return np.transpose(x.values, axes)

    def bwd(g):
        _accumulate(x, np.transpose(g, inverse))

    return _make_node("transpose", (x,), np.transpose(x.values, axes),
                      fwd, bwd)


def masked_mean(x: Tensor, mask: np.ndarray, axis: int = 1) -> Tensor:
    """Mean-pool over `axis` counting only positions where mask == 1.

    `x` is (B, T, D), `mask` is a (B, T) 0/1 array; result is (B, D).
    """
    mask = np.asarray(mask, dtype=x.values.dtype)
    if mask.shape != x.values.shape[:2] or axis != 1 or x.values.ndim != 3:
        raise ShapeError(
            f"masked_mean: expected (B, T, D) x with (B, T) mask over axis 1, "
            f"got {x.values.shape} and {mask.shape} (node '{x.label}')")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ShapeError(
            f"masked_mean: empty mask row (node '{x.label}')")
    weights = (mask / counts[:, None])[:, :, None]

    def fwd():
        return (x.values * weights).sum(axis=1)

    def bwd(g):
        _accumulate(x, g[:, None, :] * weights)

    return _make_node("masked_mean", (x,), (x.values * weights).sum(axis=1),
                      fwd, bwd)


def add_const(x: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-learnable array (attention masks, positional encodings)."""
    const = np.asarray(const, dtype=x.values.dtype)
    try:
        values = x.values + const
    except ValueError:
        raise ShapeError(
            f"add_const: cannot broadcast {x.values.shape} with "
            f"{const.shape} (node '{x.label}')") from None
    shape = x.values.shape

    def fwd():
        return x.values + const

    def bwd(g):
        _accumulate(x, _unbroadcast(g, shape))

    return _make_node("add_const", (x,), values, fwd, bwd)


OP_NAMES = ("add", "neg", "mul", "scale", "matmul", "relu", "layer_norm",
            "softmax", "log_softmax", "gather_rows", "take_per_row",
            "reduce_sum", "reduce_mean", "sumsq", "rowwise_dot",
            "stop_gradient", "concat", "reshape", "transpose", "masked_mean",
            "add_const")
