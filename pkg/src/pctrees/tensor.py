"""A small dense-array engine with reverse-mode automatic differentiation.

Arrays are numpy; every differentiable op records its parents and a closure
that pushes the output gradient back to them. ``Tensor.backward`` walks the
resulting DAG in reverse topological order, visiting each node once.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, LabelOutOfRange, ShapeMismatch

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    old, _DEFAULT_DTYPE = _DEFAULT_DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        elif arr.dtype != _DEFAULT_DTYPE and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeMismatch(f"gradient shape {grad.shape} != tensor shape {self.shape}")

        # iterative DFS; recursion depth would blow up on long graphs
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, dim=None, keepdims=False):
        return sum_over(self, dim, keepdims)

    def mean(self, dim=None, keepdims=False):
        return mean_over(self, dim, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (out > 0),))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------- reductions

def _norm_dim(dim, ndim):
    if dim is None:
        return tuple(range(ndim))
    if isinstance(dim, int):
        dim = (dim,)
    return tuple(d % ndim for d in dim)


def sum_over(x: Tensor, dim=None, keepdims: bool = False) -> Tensor:
    axes = _norm_dim(dim, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), backward)


def mean_over(x: Tensor, dim=None, keepdims: bool = False) -> Tensor:
    axes = _norm_dim(dim, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def max_over(x: Tensor, dim: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    dim = dim % x.ndim
    idx = np.argmax(x.data, axis=dim)
    out = np.take_along_axis(x.data, np.expand_dims(idx, dim), axis=dim)
    if not keepdims:
        out = np.squeeze(out, dim)

    def backward(g):
        gx = np.zeros_like(x.data)
        ge = g if keepdims else np.expand_dims(g, dim)
        np.put_along_axis(gx, np.expand_dims(idx, dim), ge, axis=dim)
        return (gx,)

    return _make(out, (x,), backward)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=dim, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=dim, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=dim, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=dim, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=dim, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=dim, keepdims=True),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], dim: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ndim = xs[0].ndim
    dim = dim % ndim
    for t in xs[1:]:
        if t.ndim != ndim or any(t.shape[i] != xs[0].shape[i] for i in range(ndim) if i != dim):
            raise ShapeMismatch(f"concat shapes {[t.shape for t in xs]} along {dim}")
    out = np.concatenate([t.data for t in xs], axis=dim)
    splits = np.cumsum([t.shape[dim] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=dim))

    return _make(out, xs, backward)


def _row_selector(flat: np.ndarray, size: int) -> sp.csr_matrix:
    """Sparse (size × len(flat)) matrix S with S @ g summing rows of g into ``flat`` targets."""
    sel = sp.csr_matrix((np.ones(flat.size, dtype=np.float32), flat, np.arange(flat.size + 1)),
                        shape=(flat.size, size))
    return sel.T.tocsr()


def _scatter_rows(rows: np.ndarray, target: np.ndarray, size: int) -> np.ndarray:
    """Sum ``rows[i]`` into output row ``target[i]``; a fast ``np.add.at``."""
    return np.asarray(_row_selector(target, size).astype(rows.dtype) @ rows)


def _flat_rows(idx: np.ndarray, m: int) -> np.ndarray:
    b = np.arange(idx.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    return (b * m + idx).reshape(-1)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: x is B×n×C, idx is B×(any shape) of row indices.

    Returns B×idx.shape[1:]×C.
    """
    if x.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"gather_rows {x.shape} with index {idx.shape}")
    n, m, c = x.shape
    flat = _flat_rows(idx, m)
    out = x.data.reshape(n * m, c)[flat].reshape(idx.shape + (c,))

    def backward(g):
        return (_scatter_rows(g.reshape(-1, c), flat, n * m).reshape(x.shape),)

    return _make(out, (x,), backward)


def grouped_linear(x: Tensor, w: Tensor, neighbors: np.ndarray, centers: np.ndarray) -> Tensor:
    """Linear map of local features ``concat(x_nbr, x_nbr - x_center) @ w``.

    x is B×m×C, w is 2C×D, neighbors B×s×k, centers B×s; returns B×s×k×D.
    Evaluated as ``x_nbr @ (w1 + w2) - x_center @ w2`` so the matmuls run per
    point rather than per (center, neighbor) pair.
    """
    bsz, m, c = x.shape
    if w.shape[0] != 2 * c or neighbors.shape[:2] != centers.shape or neighbors.shape[0] != bsz:
        raise ShapeMismatch(f"grouped_linear x {x.shape} w {w.shape} nbrs {neighbors.shape} ctr {centers.shape}")
    d = w.shape[1]
    s, k = neighbors.shape[1], neighbors.shape[2]
    w1, w2 = w.data[:c], w.data[c:]
    wsum = w1 + w2
    x2 = x.data.reshape(bsz * m, c)
    p = x2 @ wsum
    q = x2 @ w2
    nflat = _flat_rows(neighbors, m)
    cflat = _flat_rows(centers, m)
    out = p[nflat].reshape(bsz, s, k, d) - q[cflat].reshape(bsz, s, 1, d)

    def backward(g):
        gp = _scatter_rows(g.reshape(-1, d), nflat, bsz * m)
        gq = -_scatter_rows(g.sum(axis=2).reshape(-1, d), cflat, bsz * m)
        gx = (gp @ wsum.T + gq @ w2.T).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw1 = x2.T @ gp
            gw = np.concatenate([gw1, gw1 + x2.T @ gq], axis=0)
        return gx, gw

    return _make(out, (x, w), backward)


# ---------------------------------------------------------------- convolution

def _pad_hw(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)), constant_values=value)


def conv2d_nhwc(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation on channels-last input N×H×W×C with kernels F×C×kh×kw.

    im2col with patch order (kh, kw, C) keeps every copy contiguous in C.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[1]:
        raise ShapeMismatch(f"conv2d input {x.shape} (NHWC) with kernels {w.shape}")
    n, h, wd, c = x.shape
    f, _, kh, kw = w.shape
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {h}x{wd}+{padding}")
    xp = _pad_hw(x.data, padding)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride, :][:, :ho, :wo]).reshape(-1, c)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1).reshape(f, kh * kw * c))
    out = cols @ wmat.T
    if b is not None:
        out += b.data

    def backward(g):
        g2 = g.reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and kh > 1:
                gx = _conv_input_grad(g, w.data, h, wd, padding)
            else:
                gcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
                gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out.reshape(n, ho, wo, f), parents, backward)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, h: int, wd: int, padding: int) -> np.ndarray:
    """Input gradient of a stride-1 convolution as a full correlation with the flipped kernel."""
    f, c, kh, kw = w.shape
    n, ho, wo, _ = g.shape
    gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * f)
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, kh * kw * f))
    full = (cols @ wt.T).reshape(n, ho + kh - 1, wo + kw - 1, c)
    return full[:, padding:padding + h, padding:padding + wd, :]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation (no kernel flip), input N×C×H×W, kernels F×C×kh×kw."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d input {x.shape} with kernels {w.shape}")
    y = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), w, b, stride, padding)
    return transpose(y, (0, 3, 1, 2))


def maxpool2d_nhwc(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling on N×H×W×C; gradient goes to the first maximal entry of each window."""
    n, h, wd, c = x.shape
    xp = _pad_hw(x.data, padding, -np.inf)
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (wd + 2 * padding - kernel) // stride + 1
    out = xp[:, 0:stride * ho:stride, 0:stride * wo:stride, :].copy()
    for i in range(kernel):
        for j in range(kernel):
            np.maximum(out, xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :], out=out)

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(kernel):
            for j in range(kernel):
                hit = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] == out
                hit &= ~taken
                taken |= hit
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g * hit
        return (gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp,)

    return _make(out, (x,), backward)


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    y = maxpool2d_nhwc(transpose(x, (0, 2, 3, 1)), kernel, stride, padding)
    return transpose(y, (0, 3, 1, 2))


# ---------------------------------------------------------------- normalization

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, channel_axis: int, training: bool,
              momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis except ``channel_axis``.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, torch convention).
    """
    channel_axis = channel_axis % x.ndim
    c = x.shape[channel_axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batchnorm params {gamma.shape}/{beta.shape} for {c} channels")
    # work on a 2D (rows, channels) view; channels-last needs no copy
    xd = np.moveaxis(x.data, channel_axis, -1)
    moved_shape = xd.shape
    x2 = xd.reshape(-1, c)
    m = x2.shape[0]
    if m < 1:
        raise ShapeMismatch("batchnorm needs at least one element per channel")

    if training:
        mu = x2.mean(axis=0, dtype=np.float64)
        xc = x2 - mu.astype(x.dtype)
        var = np.einsum("ij,ij->j", xc, xc, dtype=np.float64) / m
        running_mean *= 1.0 - momentum
        running_mean += (momentum * mu).astype(running_mean.dtype)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += (momentum * unbiased).astype(running_var.dtype)
    else:
        var = running_var
        xc = x2 - running_mean.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc
    xhat *= inv
    out2 = xhat * gamma.data
    out2 += beta.data

    def backward(g):
        g2 = np.moveaxis(g, channel_axis, -1).reshape(-1, c)
        gbeta = g2.sum(axis=0)
        ggamma = np.einsum("ij,ij->j", g2, xhat)
        gxhat = g2 * gamma.data
        if training:
            gx2 = (inv / m) * (m * gxhat - gxhat.sum(axis=0) - xhat * np.einsum("ij,ij->j", gxhat, xhat))
        else:
            gx2 = gxhat * inv
        gx = np.moveaxis(gx2.reshape(moved_shape), -1, channel_axis)
        return gx, ggamma, gbeta

    out = np.moveaxis(out2.reshape(moved_shape), -1, channel_axis)
    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------- loss

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy logits {logits.shape} labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------- optimizers

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and state lengths differ")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"adam shapes {p.shape}/{g.shape}/{m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr,
                  self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-5, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, vel in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            vel *= self.momentum
            vel += p.grad
            p.data -= self.lr * vel

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def grad_check(f: Callable[[Tensor], Tensor], x, tolerance: float = 1e-2, h: float | None = None,
               samples: int | None = None, rng: np.random.Generator | None = None,
               reference: Callable[[Tensor], Tensor] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    The error of each checked entry is normalized by the largest gradient
    magnitude seen, so entries whose true derivative is ~0 do not explode the
    ratio. ``samples`` restricts the check to a random subset of entries.

    ``reference`` is evaluated for the finite differences instead of ``f``.
    Pass a float64 twin of a float32 function to check single-precision
    gradients of deep piecewise-linear models, where float32 differences
    cannot use a step small enough to avoid ReLU and max kinks.

    In float64, where the forward and backward one-sided slopes disagree a
    kink lies inside the step, and the entry is retried with steps of h/10
    and h/100.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    if not np.issubdtype(x0.dtype, np.floating):
        x0 = x0.astype(_DEFAULT_DTYPE)
    if reference is not None:
        fd, xd = reference, x0.astype(np.float64)
    else:
        fd, xd = f, x0
    if h is None:
        h = 1e-3 if xd.dtype == np.float32 else 1e-6

    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ShapeMismatch("grad_check needs a scalar-valued function")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    flat_idx = np.arange(x0.size)
    if samples is not None and samples < x0.size:
        rng = rng or np.random.default_rng(0)
        flat_idx = np.sort(rng.choice(x0.size, size=samples, replace=False))

    numeric = np.zeros(len(flat_idx), dtype=np.float64)
    with no_grad():
        f0 = float(fd(Tensor(xd)).data)
        for n, i in enumerate(flat_idx):
            best = None
            # float32 differences at smaller steps are dominated by rounding
            steps = (h, h / 10, h / 100) if xd.dtype == np.float64 else (h,)
            for step in steps:
                xp = xd.copy().reshape(-1)
                xp[i] += step
                fp = float(fd(Tensor(xp.reshape(xd.shape))).data)
                xp[i] -= 2 * step
                fm = float(fd(Tensor(xp.reshape(xd.shape))).data)
                fwd, bwd = (fp - f0) / step, (f0 - fm) / step
                # one-sided slopes that disagree mean a kink lies within the step
                gap = abs(fwd - bwd) / max(abs(fwd), abs(bwd), 1e-3)
                if best is None or gap < best[0]:
                    best = (gap, (fp - fm) / (2 * step))
                if gap <= tolerance:
                    break
            numeric[n] = best[1]
    a = analytic.reshape(-1)[flat_idx].astype(np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    err = float(np.abs(a - numeric).max(initial=0.0) / scale)
    return GradCheckReport(err, tolerance, len(flat_idx), a, numeric)


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"PCTW"


def save_checkpoint(path, named: Iterable[tuple[str, np.ndarray]]) -> None:
    """Little-endian flat binary: magic, u32 count, then name/rank/dims/f32 payload."""
    items = list(named)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a parameter checkpoint")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
