"""Reverse-mode gradients for the handful of ops the models need.

Each op returns a Tensor holding the forward value, its parents, and a closure
that scatters the upstream gradient into the parents. backward() walks the
graph once in reverse topological order. Only the fixed feed-forward
architectures used here are supported; there is no broadcasting beyond bias
addition, and shapes are validated at call time.

Dtype follows the inputs: float32 in training, float64 when gradient-checking.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_RELU_TRACE: list | None = None


@contextmanager
def trace_relu_signs(dest: list):
    """Collect each ReLU's pre-activation sign mask into `dest` during forward."""
    global _RELU_TRACE
    prev = _RELU_TRACE
    _RELU_TRACE = dest
    try:
        yield dest
    finally:
        _RELU_TRACE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    def backward(self) -> None:
        if self.data.shape != ():
            raise ValueError("backward() starts from a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is not None:
                node._bwd(node.grad)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(data, parents, bwd) -> Tensor:
    t = Tensor(data)
    t._parents = tuple(parents)
    t._bwd = bwd
    return t


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(mask)

    def bwd(g):
        x.grad += g * mask

    return _op(np.maximum(x.data, 0), (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"linear: {x.data.shape} @ {w.data.shape}")

    def bwd(g):
        x.grad += g @ w.data.T
        w.grad += x.data.T @ g
        b.grad += g.sum(axis=0)

    return _op(x.data @ w.data + b.data, (x, w, b), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """Cross-correlation, NCHW layout, weights (out, in, kh, kw).

    im2col once, one batched matmul; the column buffer is kept for backward.
    """
    n, c, h, wd = x.data.shape
    co, ci, kh, kw = w.data.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {ci}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    def tap(arr, di, dj):
        return arr[:, :, di : di + stride * (ho - 1) + 1 : stride,
                   dj : dj + stride * (wo - 1) + 1 : stride]

    cols = np.empty((n, c, kh * kw, ho, wo), dtype=x.data.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di * kw + dj] = tap(xp, di, dj)
    cols_m = cols.reshape(n, c * kh * kw, ho * wo)
    w_flat = w.data.reshape(co, c * kh * kw)
    out = np.matmul(w_flat, cols_m).reshape(n, co, ho, wo)
    out += b.data.reshape(1, co, 1, 1)

    def bwd(g):
        b.grad += g.sum(axis=(0, 2, 3))
        gm = g.reshape(n, co, ho * wo)
        if co <= ho * wo:  # batched form is faster while its temp stays small
            dw = np.matmul(gm, cols_m.transpose(0, 2, 1)).sum(axis=0)
        else:
            dw = np.tensordot(gm, cols_m, axes=([0, 2], [0, 2]))
        w.grad += dw.reshape(w.data.shape)
        dcols = np.matmul(w_flat.T, gm).reshape(n, c, kh * kw, ho, wo)
        dxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                tap(dxp, di, dj)[...] += dcols[:, :, di * kw + dj]
        x.grad += dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp

    return _op(out, (x, w, b), bwd)


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape

    def bwd(g):
        x.grad += g.reshape(shape)

    return _op(x.data.reshape(shape[0], -1), (x,), bwd)


def concat(parts, axis: int = 1) -> Tensor:
    parts = tuple(parts)
    sizes = [p.data.shape[axis] for p in parts]
    edges = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g):
        for p, a, b in zip(parts, edges[:-1], edges[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(a, b)
            p.grad += g[tuple(idx)]

    return _op(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        a.grad += g
        b.grad += g

    return _op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub: {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        a.grad += g
        b.grad -= g

    return _op(a.data - b.data, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        x.grad += g * c

    return _op(x.data * c, (x,), bwd)


def add_const(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        x.grad += g

    return _op(x.data + c, (x,), bwd)


def mean(x: Tensor) -> Tensor:
    def bwd(g):
        x.grad += (g / x.data.size) * np.ones_like(x.data)

    return _op(np.asarray(x.data.mean()), (x,), bwd)


def l2_rows(x: Tensor) -> Tensor:
    """Euclidean norm of each row of a (B, D) tensor; zero subgradient at 0."""
    norms = np.sqrt((x.data * x.data).sum(axis=1))

    def bwd(g):
        denom = norms.copy()
        denom[denom == 0] = 1
        gx = (g / denom)[:, None] * x.data
        gx[norms == 0] = 0
        x.grad += gx

    return _op(norms, (x,), bwd)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)

    def bwd(g):
        np.add.at(x.grad, idx, g)

    return _op(x.data[idx], (x,), bwd)


def rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous row slice of a batch-major tensor."""

    def bwd(g):
        x.grad[lo:hi] += g

    return _op(x.data[lo:hi], (x,), bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} for {n} logits rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(logp)

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1
        logits.grad += gl * (g / n)

    return _op(np.asarray(-logp[np.arange(n), labels].mean()), (logits,), bwd)
