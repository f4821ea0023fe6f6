"""Dense tensors with a dynamic reverse-mode tape.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the recorded graph in a fixed
topological order, so gradient accumulation is bitwise reproducible.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._live: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracks_grad(self) -> bool:
        return self.requires_grad

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class Parameter(Tensor):
    """Trainable leaf. While ``frozen`` is set, ops record no gradient path to it."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.frozen = False

    @property
    def tracks_grad(self) -> bool:
        return self.requires_grad and not self.frozen

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


@contextlib.contextmanager
def frozen(params: Iterable[Parameter]):
    params = list(params)
    prev = [p.frozen for p in params]
    for p in params:
        p.frozen = True
    try:
        yield
    finally:
        for p, f in zip(params, prev):
            p.frozen = f


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if not _grad_enabled:
        return out
    # frozen flags are read here, at record time
    live = tuple(p.tracks_grad for p in parents)
    if any(live):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._live = live
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tracking leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p, live in reversed(list(zip(node._parents, node._live))):
            if live and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg, live in zip(node._parents, parent_grads, node._live):
            if pg is None or not live:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data.copy())


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a.dtype if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


# -- shape ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return mul(tsum(a), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


# -- linear algebra ---------------------------------------------------------

def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Batched product ``[..., M, K] @ [..., K, N]``; size-1 batch dims broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    for x, y in zip(ba[::-1], bb[::-1]):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), bw)


matmul = matmul_batched


def softmax_last_axis(t: Tensor, temperature: float = 1.0) -> Tensor:
    x = t.data
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    if temperature != 1.0:
        x = x / temperature
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        gx = y * (g - (g * y).sum(axis=-1, keepdims=True))
        if temperature != 1.0:
            gx = gx / temperature
        return (gx,)

    return _make(y, (t,), bw)


# -- convolution ------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if stride < 1 or padding < 0 or span < 0 or span % stride:
        raise ConfigurationError(
            f"conv output size ({n} + 2*{padding} - {k})/{stride} + 1 is not a positive integer")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``[B, Cin, H, W]`` with ``[Cout, Cin, k, k]``."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    B, Cin, H, W = x.shape
    Cout, _, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError(f"conv2d needs a square kernel, got {kernel.shape}")
    Ho = _out_size(H, k, stride, padding)
    Wo = _out_size(W, k, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # B,Cin,Ho,Wo,k,k
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, Cin * k * k, Ho * Wo)
    wmat = kernel.data.reshape(Cout, Cin * k * k)
    out = np.matmul(wmat, cols).reshape(B, Cout, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1, 1)

    padded_shape = xp.shape

    def bw(g):
        g2 = g.reshape(B, Cout, Ho * Wo)
        gw = np.matmul(g2, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(kernel.shape)
        gcols = np.matmul(wmat.T, g2).reshape(B, Cin, k, k, Ho, Wo)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, parents, bw)


def pad2d(x: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad the two trailing spatial axes, ``before`` rows/cols in front and ``after`` behind."""
    if before == 0 and after == 0:
        return x
    H, W = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(before, after), (before, after)]
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[..., before:before + H, before:before + W],))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),))


# -- loss -------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: Optional[int] = None) -> Tensor:
    """Mean pixel-wise ``-log softmax(logits)[label]`` over non-ignored pixels."""
    if logits.ndim != 4:
        raise DimensionError(f"logits must be [B,K,H,W], got {logits.shape}")
    B, K, H, W = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B, H, W):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_label is None else labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= K))
    if bad.any():
        b, r, c = np.argwhere(bad)[0]
        raise DataError(f"label {labels[b, r, c]} out of range [0, {K}) at (batch={b}, row={r}, col={c})")
    n = int(valid.sum())
    if n == 0:
        raise DataError("every pixel is ignored; loss undefined")

    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / n

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((p - onehot) * valid[:, None] * (g / n),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), bw)
