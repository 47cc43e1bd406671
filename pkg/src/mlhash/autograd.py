"""Minimal reverse-mode differentiation over dense 2-D float64 matrices.

Graphs are built by running ordinary Python code (define-by-run). Every op
returns a new :class:`Node`; values are never mutated after creation.
Gradients are accumulated with ``+=`` into ``Node.grad`` by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_FLOOR = 1e-12

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build nodes without parents or backward rules (inference only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def as_tensor(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad",
                 "detached", "op", "info")

    def __init__(self, value, parents: Sequence["Node"] = (),
                 backward_fn: Callable | None = None, op: str = "leaf",
                 requires_grad: bool = False, detached: bool = False):
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.detached = detached
        self.op = op
        self.info: dict = {}

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ValueError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def param(value) -> Node:
    """Trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Node:
    return Node(value)


def _make(value, parents, backward_fn, op) -> Node:
    if not _grad_enabled():
        return Node(value, op=op)
    track = any(p.requires_grad for p in parents)
    if not track:
        return Node(value, op=op)
    return Node(value, parents, backward_fn, op, requires_grad=True)


def _check_same(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Linear algebra and elementwise ops
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), bw, "matmul")


def transpose(a: Node) -> Node:
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a: Node, b: Node) -> Node:
    _check_same(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Node, b: Node) -> Node:
    _check_same(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Node, b: Node) -> Node:
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def add_bias(x: Node, b: Node) -> Node:
    if b.shape != (1, x.shape[1]):
        raise ValueError(f"add_bias: bias shape {b.shape} does not fit {x.shape}")

    def bw(g):
        return g, g.sum(axis=0, keepdims=True)

    return _make(x.value + b.value, (x, b), bw, "add_bias")


def mul_col(x: Node, w: Node) -> Node:
    """Scale row ``n`` of ``x`` by the scalar ``w[n, 0]``."""
    if w.shape != (x.shape[0], 1):
        raise ValueError(f"mul_col: weight shape {w.shape} does not fit {x.shape}")
    xv, wv = x.value, w.value

    def bw(g):
        return g * wv, (g * xv).sum(axis=1, keepdims=True)

    return _make(xv * wv, (x, w), bw, "mul_col")


def scale(x: Node, s: float) -> Node:
    s = float(s)
    return _make(x.value * s, (x,), lambda g: (g * s,), "scale")


def add_scalar(x: Node, s: float) -> Node:
    return _make(x.value + float(s), (x,), lambda g: (g,), "add_scalar")


def relu(x: Node) -> Node:
    xv = x.value
    # subgradient 0 at 0
    mask = xv > 0
    return _make(np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,), "relu")


def sum_all(x: Node) -> Node:
    shape = x.shape
    return _make(np.array([[x.value.sum()]]), (x,),
                 lambda g: (np.full(shape, g[0, 0]),), "sum_all")


def mean_all(x: Node) -> Node:
    shape = x.shape
    n = x.value.size
    return _make(np.array([[x.value.mean()]]), (x,),
                 lambda g: (np.full(shape, g[0, 0] / n),), "mean_all")


def log(x: Node) -> Node:
    xv = x.value
    return _make(np.log(xv), (x,), lambda g: (g / xv,), "log")


def clamp(x: Node, lo: float, hi: float) -> Node:
    xv = x.value
    inside = (xv > lo) & (xv < hi)
    return _make(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def stable_softplus(x: np.ndarray) -> np.ndarray:
    """``log(1 + e^x)`` as ``log(1 + e^{-|x|}) + max(0, x)``; never overflows."""
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x: Node) -> Node:
    xv = x.value
    return _make(stable_softplus(xv), (x,), lambda g: (g * sigmoid(xv),), "softplus")


def softmax_rows(x: Node) -> Node:
    xv = x.value
    z = np.exp(xv - xv.max(axis=1, keepdims=True))
    y = z / z.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax_rows")


def _floored_norms(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = np.sqrt((v * v).sum(axis=1, keepdims=True))
    floored = raw < NORM_FLOOR
    return np.where(floored, NORM_FLOOR, raw), floored


def row_normalize(x: Node) -> Node:
    """Divide each row by its Euclidean norm (floored at ``NORM_FLOOR``)."""
    xv = x.value
    n, floored = _floored_norms(xv)
    y = xv / n
    # a floored norm is a constant, so the projection term drops out
    live = ~floored

    def bw(g):
        return ((g - live * y * (g * y).sum(axis=1, keepdims=True)) / n,)

    out = _make(y, (x,), bw, "row_normalize")
    out.info["zero_rows"] = int(floored.sum())
    return out


def row_cosine(a: Node, b: Node) -> Node:
    """Per-row cosine similarity, an N x 1 column."""
    _check_same(a, b, "row_cosine")
    av, bv = a.value, b.value
    na, fa = _floored_norms(av)
    nb, fb = _floored_norms(bv)
    dot = (av * bv).sum(axis=1, keepdims=True)
    cos = dot / (na * nb)

    def bw(g):
        ga = g * (bv / (na * nb) - (~fa) * cos * av / (na * na))
        gb = g * (av / (na * nb) - (~fb) * cos * bv / (nb * nb))
        return ga, gb

    # clip only removes ulp-level excursions past +-1
    out = _make(np.clip(cos, -1.0, 1.0), (a, b), bw, "row_cosine")
    out.info["zero_rows"] = int(fa.sum() + fb.sum())
    return out


def take_rows(x: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.value[idx], (x,), bw, "take_rows")


def take_col(x: Node, j: int) -> Node:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, j] = g[:, 0]
        return (out,)

    return _make(x.value[:, j:j + 1].copy(), (x,), bw, "take_col")


def scatter_rows(x: Node, idx, n: int) -> Node:
    """Place the rows of ``x`` at positions ``idx`` of an ``n``-row zero matrix."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(idx) != x.shape[0]:
        raise ValueError("scatter_rows: index length does not match rows")
    out = np.zeros((n, x.shape[1]))
    out[idx] = x.value
    return _make(out, (x,), lambda g: (g[idx],), "scatter_rows")


def detach(x: Node) -> Node:
    """Same value, no path back to ``x`` (stop-gradient)."""
    return Node(x.value, op="detach", detached=True)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    # Upstream grads for this pass live in `pending`; only the per-pass total is
    # added to node.grad, so repeated calls accumulate linearly.
    pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def zero_grads(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


def graph_dump(root: Node) -> str:
    """One line per reachable node: op, shape and gradient norm."""
    lines = []
    for i, node in enumerate(reversed(_topo_order(root))):
        gn = float(np.linalg.norm(node.grad))
        lines.append(f"{i:4d} {node.op:<14s} {node.shape[0]}x{node.shape[1]:<6d} |grad|={gn:.6e}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], Node | float], params: Sequence[Node],
                      eps: float = 1e-5,
                      reference: Callable[[], Node | float] | None = None) -> float:
    """Max relative error between backward() gradients and central differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar node. Relative error per coordinate is
    ``|a - n| / max(1e-12, |a| + |n|)``.

    When ``f`` contains stop-gradients its numeric derivative is not what
    backward computes. ``reference`` then supplies the function to perturb:
    same value as ``f`` at the current point, with every detached quantity
    held at that point's value.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = f if reference is None else reference

    def value() -> float:
        out = g()
        v = out.item() if isinstance(out, Node) else float(out)
        if not np.isfinite(v):
            raise FloatingPointError("finite_diff_check: f returned a non-finite value")
        return v

    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.item()):
        raise FloatingPointError("finite_diff_check: f returned a non-finite value")
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        base = p.value
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += eps
            minus = base.copy()
            minus[idx] -= eps
            p.value = plus
            fp = value()
            p.value = minus
            fm = value()
            p.value = base
            num = (fp - fm) / (2 * eps)
            err = abs(a[idx] - num) / max(1e-12, abs(a[idx]) + abs(num))
            worst = max(worst, err)
    return worst
