"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a node holding its forward value and a closure mapping the
output adjoint to parent adjoints. ``backward`` linearises the ancestry of a
scalar into a :class:`DiffGraph` (creation order is a valid topological
order) and sweeps it once in reverse.
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_seq = itertools.count()
_grad_enabled = True

# products where every dim is at most this run through the sequential kernel
SMALL_MATMUL = 16


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_seq)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes)
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- graph ----

@dataclass
class DiffGraph:
    """Ancestry of one output, in creation (append) order.

    ``parents[i]`` lists indices into ``nodes`` for node ``i``; every parent
    index is smaller than ``i``.
    """

    nodes: list[Tensor]
    parents: list[tuple[int, ...]]
    index: dict[int, int]

    @classmethod
    def trace(cls, out: Tensor) -> "DiffGraph":
        seen: dict[int, Tensor] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        nodes = sorted(seen.values(), key=lambda t: t._seq)
        index = {id(t): i for i, t in enumerate(nodes)}
        parents = [tuple(index[id(p)] for p in t._parents if id(p) in index) for t in nodes]
        return cls(nodes, parents, index)


def backward(out: Tensor, graph: DiffGraph | None = None) -> DiffGraph:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``out``."""
    if out.data.size != 1 or out.data.ndim > 1:
        raise ValueError(f"backward needs a scalar output, got shape {out.shape}")
    if not out.requires_grad:
        raise ValueError("output does not depend on any tensor that requires grad")
    graph = graph or DiffGraph.trace(out)
    adj: dict[int, np.ndarray] = {len(graph.nodes) - 1: np.ones_like(out.data)}
    for i in range(len(graph.nodes) - 1, -1, -1):
        g = adj.pop(i, None)
        if g is None:
            continue
        node = graph.nodes[i]
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            j = graph.index[id(p)]
            adj[j] = pg if j not in adj else adj[j] + pg
    return graph


# ----------------------------------------------------------- arithmetic ----

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / b.data**2, b.shape)
    return _make(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def _sequential_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # textbook k-loop accumulation order
    acc = a[..., :, 0, None] * b[..., 0, None, :]
    for q in range(1, a.shape[-1]):
        acc = acc + a[..., :, q, None] * b[..., q, None, :]
    return acc


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # plain 2-D products of small matrices keep the textbook summation order
    if a.ndim == 2 and b.ndim == 2 and max(a.shape + b.shape[1:]) <= SMALL_MATMUL and a.shape[1] > 0:
        return _sequential_matmul(a, b)
    return a @ b


def matmul(a, b) -> Tensor:
    """``a @ b`` over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim == 2:
        return _matmul_shared(a, b)
    out = _mm(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(_mm(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), bw, "matmul")


def _matmul_shared(a: Tensor, b: Tensor) -> Tensor:
    # stacked rows against one shared matrix: a single 2-D product
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

    def bw(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), bw, "matmul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)
    return _make(out, (a,), bw, "gelu")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# --------------------------------------------------------------- shapes ----

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None))) or p is Ellipsis for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _make(a.data[idx], (a,), bw, "getitem")


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))
    return _make(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _make(out, tensors, bw, "stack")


# ----------------------------------------------------------- reductions ----

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def mean_pool(a: Tensor, axis: int = -2) -> Tensor:
    return mean(a, axis=axis)


# ------------------------------------------------------- normalisations ----

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (x,), bw, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-10) -> Tensor:
    """Normalise the last axis to zero mean / unit (population) variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        # the affine part is its own node, so g here is d/d(xhat)
        dx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (dx,)
    out = _make(xhat, (x,), bw, "layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    if np.any(norm <= 1e-12):
        raise DegenerateInputError("cannot normalise a (near) zero-norm vector")
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)
    return _make(out, (x,), bw, "l2_normalize")


def cosine_similarity(u: Tensor, v: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``u`` and ``v`` along ``axis`` (broadcasting)."""
    u, v = as_tensor(u), as_tensor(v)
    return sum_(mul(l2_normalize(u, axis), l2_normalize(v, axis)), axis=axis)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = reshape(logits, (1, -1))
        labels = labels.reshape(1)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes: {labels.tolist()}")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(b), labels))
    return scale(sum_(picked), -1.0 / b)


# ----------------------------------------------------------- convolution ----

def im2col(x: Tensor, k: int, stride: int, pad: int) -> Tensor:
    """Channel-last patches: (B, H, W, C) -> (B, Ho, Wo, k*k*C), zero padded."""
    b, h, w, c = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((b, ho, wo, k * k * c))
    offsets = [(di, dj) for di in range(k) for dj in range(k)]
    for n, (di, dj) in enumerate(offsets):
        cols[..., n * c:(n + 1) * c] = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]

    def bw(g):
        gp = np.zeros_like(xp)
        for n, (di, dj) in enumerate(offsets):
            gp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += g[..., n * c:(n + 1) * c]
        return (gp[:, pad:pad + h, pad:pad + w, :],)
    return _make(cols, (x,), bw, "im2col")


# ------------------------------------------------------------ gradcheck ----

def gradcheck(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of scalar ``fn`` and central differences."""
    x = Tensor(np.array(point, dtype=np.float64, copy=True), requires_grad=True)
    out = fn(x)
    if out.requires_grad:
        backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(Tensor(x.data.copy())).item()
            flat[i] = orig - eps
            fm = fn(Tensor(x.data.copy())).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
