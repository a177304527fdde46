"""Reverse-mode automatic differentiation over a small fixed op set.

Every model in this repo is an MLP, so the graph machinery stays minimal:
values are numpy arrays, ops build `Node`s with stored vector-Jacobian
callbacks, and `backward` walks the graph once. Training code uses float32
storage; explicit reduction ops (sums, means, logsumexp, bias gradients)
accumulate in float64 and cast back. Graphs built from float64 leaves stay
in float64 end to end, which is how `gradient_check` gets clean
finite-difference comparisons.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractViolation


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value)
        self.parents = parents  # tuple of (Node, vjp) pairs
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype


def leaf(value) -> Node:
    return Node(np.asarray(value))


def _reduce_to(g, shape, dtype):
    """Sum-reduce a gradient onto a (possibly broadcast) operand shape."""
    g = np.asarray(g)
    if g.shape == shape:
        return g.astype(dtype, copy=False)
    # sum out prepended axes, then broadcast axes of size 1
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True, dtype=np.float64)
    return g.astype(dtype, copy=False)


# -- arithmetic --------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    out = a.value + b.value
    return Node(out, (
        (a, lambda g: _reduce_to(g, a.shape, a.dtype)),
        (b, lambda g: _reduce_to(g, b.shape, b.dtype)),
    ))


def sub(a: Node, b: Node) -> Node:
    out = a.value - b.value
    return Node(out, (
        (a, lambda g: _reduce_to(g, a.shape, a.dtype)),
        (b, lambda g: _reduce_to(-g, b.shape, b.dtype)),
    ))


def mul(a: Node, b: Node) -> Node:
    out = a.value * b.value
    return Node(out, (
        (a, lambda g: _reduce_to(g * b.value, a.shape, a.dtype)),
        (b, lambda g: _reduce_to(g * a.value, b.shape, b.dtype)),
    ))


def scale(a: Node, c: float) -> Node:
    c = a.dtype.type(c)
    return Node(a.value * c, ((a, lambda g: g * c),))


def shift(a: Node, c: float) -> Node:
    c = a.dtype.type(c)
    return Node(a.value + c, ((a, lambda g: g),))


def neg(a: Node) -> Node:
    return Node(-a.value, ((a, lambda g: -g),))


def square(a: Node) -> Node:
    two = a.dtype.type(2.0)
    return Node(a.value * a.value, ((a, lambda g: g * (two * a.value)),))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, ((a, lambda g: g * out),))


def log(a: Node) -> Node:
    out = np.log(a.value)
    return Node(out, ((a, lambda g: g / a.value),))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    one = out.dtype.type(1.0)
    return Node(out, ((a, lambda g: g * (one - out * out)),))


def relu(a: Node) -> Node:
    out = np.maximum(a.value, 0)
    mask = (a.value > 0).astype(a.dtype)
    return Node(out, ((a, lambda g: g * mask),))


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    out = np.clip(a.value, lo, hi)
    mask = ((a.value >= lo) & (a.value <= hi)).astype(a.dtype)
    return Node(out, ((a, lambda g: g * mask),))


# -- linear algebra ----------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    out = a.value @ b.value
    return Node(out, (
        (a, lambda g: g @ b.value.swapaxes(-1, -2)),
        (b, lambda g: a.value.swapaxes(-1, -2) @ g),
    ))


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b for 2-D x (batch, fan_in); bias gradient accumulates in f64."""
    if x.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
        raise ContractViolation(
            f"affine: x shape {x.value.shape} incompatible with w {w.value.shape}"
        )
    out = x.value @ w.value + b.value
    return Node(out, (
        (x, lambda g: g @ w.value.T),
        (w, lambda g: x.value.T @ g),
        (b, lambda g: g.sum(axis=0, dtype=np.float64).astype(b.dtype)),
    ))


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)
    return Node(a.value.reshape(shape), ((a, lambda g: np.asarray(g).reshape(a.shape)),))


def slice_last(a: Node, lo: int, hi: int) -> Node:
    """View of a[..., lo:hi]."""
    out = a.value[..., lo:hi]

    def vjp(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[..., lo:hi] = g
        return full

    return Node(out, ((a, vjp),))


def concat(nodes, axis: int = -1) -> Node:
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, n in enumerate(nodes):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(sl)]

        parents.append((n, vjp))
    return Node(out, tuple(parents))


# -- reductions (float64 accumulation) ----------------------------------------


def sum_all(a: Node) -> Node:
    out = a.dtype.type(a.value.sum(dtype=np.float64))
    return Node(out, ((a, lambda g: np.broadcast_to(g, a.shape).astype(a.dtype)),))


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = a.dtype.type(a.value.sum(dtype=np.float64) / n)
    inv = 1.0 / n
    return Node(out, ((a, lambda g: (np.broadcast_to(g, a.shape) * inv).astype(a.dtype)),))


def sum_last(a: Node) -> Node:
    """Sum over the last axis."""
    out = a.value.sum(axis=-1, dtype=np.float64).astype(a.dtype)
    return Node(out, ((a, lambda g: np.broadcast_to(g[..., None], a.shape).astype(a.dtype)),))


def mean_last(a: Node) -> Node:
    n = a.value.shape[-1]
    out = (a.value.sum(axis=-1, dtype=np.float64) / n).astype(a.dtype)
    inv = 1.0 / n
    return Node(out, ((a, lambda g: (np.broadcast_to(g[..., None], a.shape) * inv).astype(a.dtype)),))


def log_softmax(a: Node, axis: int = -1) -> Node:
    m = a.value.max(axis=axis, keepdims=True)
    shifted = a.value - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(a.dtype)
    out = shifted - lse

    def vjp(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(a.dtype)

    return Node(out, ((a, vjp),))


def softmax(a: Node, axis: int = -1) -> Node:
    return exp(log_softmax(a, axis=axis))


# -- composite losses ---------------------------------------------------------


def cross_entropy(logits: Node, target_probs: Node, axis: int = -1) -> Node:
    """Mean over all leading axes of -sum(target * log_softmax(logits))."""
    return mean_all(neg(sum_last(mul(target_probs, log_softmax(logits, axis=axis)))))


def mse(pred: Node, target: Node) -> Node:
    return mean_all(square(sub(pred, target)))


# -- backward pass ------------------------------------------------------------


def backward(loss: Node) -> None:
    """Populate .grad on every node reachable from a scalar loss."""
    if loss.value.ndim != 0:
        raise ContractViolation(f"backward expects a scalar loss, got shape {loss.value.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones((), dtype=loss.dtype)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=parent.dtype, copy=True)
            else:
                parent.grad = parent.grad + contrib


def grad(loss: Node, leaves) -> list:
    backward(loss)
    out = []
    for lf in leaves:
        g = lf.grad
        out.append(np.zeros_like(lf.value) if g is None else np.asarray(g, dtype=lf.dtype))
    return out


# -- finite-difference oracle --------------------------------------------------


def finite_difference(build_loss, params: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of build_loss at params, all in float64."""
    p = np.asarray(params, dtype=np.float64)
    g = np.zeros_like(p)
    for i in range(p.size):
        dp = np.zeros_like(p)
        dp[i] = h
        up = float(build_loss(leaf(p + dp)).value)
        dn = float(build_loss(leaf(p - dp)).value)
        g[i] = (up - dn) / (2 * h)
    return g


def gradient_check(build_loss, params: np.ndarray, h: float = 1e-3) -> float:
    """Max deviation between reverse-mode and central-difference gradients,
    relative to the finite-difference gradient's infinity norm.

    `build_loss(param_leaf) -> scalar Node` must construct the full graph
    from the given leaf; the check evaluates it in float64.
    """
    p = np.asarray(params, dtype=np.float64)
    lf = leaf(p.copy())
    loss = build_loss(lf)
    (g_ad,) = grad(loss, [lf])
    g_fd = finite_difference(build_loss, p, h=h)
    denom = max(np.abs(g_fd).max(), 1e-8)
    return float(np.abs(g_ad - g_fd).max() / denom)
