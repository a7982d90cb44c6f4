"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the denoiser, encoder, adapter and losses need are here.
Each op records a closure that pushes the output gradient to its parents.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from mofu import numerics

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_var(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_var(other), self)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return vsum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(data: np.ndarray, parents: Sequence[Var], backward: Callable[[np.ndarray], None]) -> Var:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Var(data, True, tuple(parents), backward)
    return Var(data)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Var) -> Var:
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def power(a: Var, p: float) -> Var:
    out = a.data ** p
    return _make(out, (a,), lambda g: a._accumulate(g * p * a.data ** (p - 1)))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        # promote vectors the way numpy does, then drop the inserted axes again
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        g = np.asarray(g)
        if b.ndim == 1:
            g = g[..., None]
        if a.ndim == 1:
            g = np.expand_dims(g, -2)
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            if a.ndim == 1:
                ga = ga.reshape(-1, *ga.shape[-2:]).sum(axis=0)[0]
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
            if b.ndim == 1:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)[:, 0]
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def vsum(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw)


def reshape(a: Var, shape) -> Var:
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: a._accumulate(g.transpose(inv)))


def getitem(a: Var, idx) -> Var:
    out = np.ascontiguousarray(a.data[idx])

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(out, (a,), bw)


def concat(xs: Iterable, axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)

    def bw(g):
        for x, piece in zip(xs, np.split(g, np.cumsum(sizes)[:-1], axis=axis)):
            if x.requires_grad:
                x._accumulate(piece)

    return _make(out, xs, bw)


def stack(xs: Iterable, axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def bw(g):
        for i, x in enumerate(xs):
            if x.requires_grad:
                x._accumulate(np.take(g, i, axis=axis))

    return _make(out, xs, bw)


def exp(a: Var) -> Var:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * out))


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(a) -> Var:
    """tanh-approximated GELU."""
    a = as_var(a)
    x = a.data
    th = np.tanh(_GELU_K * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dth = (1.0 - th * th) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
        a._accumulate(g * (0.5 * (1.0 + th) + 0.5 * x * dth))

    return _make(out, (a,), bw)


def layer_norm(a, eps: float = numerics.LAYER_NORM_EPS) -> Var:
    a = as_var(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = numerics.layer_norm(x, eps)

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - y * gy))

    return _make(y, (a,), bw)


def softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    y = numerics.softmax(a.data, axis=axis)

    def bw(g):
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), bw)


def _im2col(x: np.ndarray) -> np.ndarray:
    # x: (..., c, H, W) -> (..., c*9, H*W) with zero padding 1
    *lead, c, h, w = x.shape
    xp = np.pad(x, [(0, 0)] * len(lead) + [(0, 0), (1, 1), (1, 1)])
    cols = np.stack([xp[..., dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)], axis=-3)
    return cols.reshape(*lead, c * 9, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    lead = cols.shape[:-2]
    cols = cols.reshape(*lead, c, 9, h, w)
    xp = np.zeros((*lead, c, h + 2, w + 2))
    for k in range(9):
        dy, dx = divmod(k, 3)
        xp[..., dy:dy + h, dx:dx + w] += cols[..., :, k, :, :]
    return xp[..., 1:-1, 1:-1]


def conv3x3(x, weight, bias) -> Var:
    """Stride-1, zero-padding-1 3x3 convolution (cross-correlation).

    x: (..., c, H, W); weight: (d, c, 3, 3); bias: (d,).
    """
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    *lead, c, h, w = x.shape
    d = weight.shape[0]
    if weight.shape[1:] != (c, 3, 3):
        raise ValueError(f"conv3x3: weight {weight.shape} does not match {c} input channels")
    cols = _im2col(x.data)
    wmat = weight.data.reshape(d, c * 9)
    out = (wmat @ cols).reshape(*lead, d, h, w) + bias.data[:, None, None]

    def bw(g):
        gf = g.reshape(*lead, d, h * w)
        if bias.requires_grad:
            bias._accumulate(gf.sum(axis=-1).reshape(-1, d).sum(axis=0))
        if weight.requires_grad:
            gw = gf @ np.swapaxes(cols, -1, -2)
            weight._accumulate(gw.reshape(-1, d, c * 9).sum(axis=0).reshape(weight.shape))
        if x.requires_grad:
            x._accumulate(_col2im(wmat.T @ gf, c, h, w))

    return _make(out, (x, weight, bias), bw)


def custom(out: np.ndarray, parents: Sequence[Var], backward: Callable[[np.ndarray], None]) -> Var:
    """Wrap a value computed elsewhere together with a hand-written backward."""
    return _make(out, tuple(parents), backward)
