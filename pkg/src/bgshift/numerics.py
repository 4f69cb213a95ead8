"""Dense float tensors with taped reverse-mode gradients.

A Tensor wraps a numpy array; every op that can influence a loss records a
backward closure on the result, so the tape is implicit in the parent links.
``Tensor.backward()`` walks the tape once in reverse topological order and
accumulates into ``.grad``. 64-bit floats are the default; float32 can be
requested per tensor. ``finite_difference_gradient`` is the independent
oracle used to check every differentiable op.
"""
from __future__ import annotations

import contextlib

import numpy as np

from .exceptions import OracleError, ShapeError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (frozen models, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # keep numpy from hijacking `ndarray <op> Tensor`
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _from_op(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _from_op(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _from_op(data, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    data = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _from_op(data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(data, (a, b), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        return (g * data,)

    return _from_op(data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _from_op(data, (a,), bw)


def clip_min(a, lo: float) -> Tensor:
    """Elementwise max(a, lo); gradient passes only where a > lo."""
    a = as_tensor(a)
    data = np.maximum(a.data, lo)

    def bw(g):
        return (g * (a.data > lo),)

    return _from_op(data, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - data * data),)

    return _from_op(data, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        return (g * data * (1.0 - data),)

    return _from_op(data, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0),)

    return _from_op(data, (a,), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _from_op(data, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _from_op(data, (a,), bw)


def take_channels(a: Tensor, idx) -> Tensor:
    """Select channels ``idx`` (unique ints) along the last axis."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or len(np.unique(idx)) != idx.size:
        raise ShapeError("take_channels expects a 1-D list of unique channel indices")
    data = a.data[..., idx]

    def bw(g):
        z = np.zeros_like(a.data)
        z[..., idx] = g
        return (z,)

    return _from_op(data, (a,), bw)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[...] = a[..., idx[...]] with idx shaped like a minus its last axis."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError("gather_last index shape must match the leading dims")
    k = a.data.shape[-1]
    flat = a.data.reshape(-1, k)
    fidx = idx.reshape(-1)
    rows = np.arange(flat.shape[0])
    data = flat[rows, fidx].reshape(idx.shape)

    def bw(g):
        z = np.zeros_like(flat)
        z[rows, fidx] = g.reshape(-1)
        return (z.reshape(a.data.shape),)

    return _from_op(data, (a,), bw)


def narrow_last(a: Tensor, start: int, size: int) -> Tensor:
    """Slice [start, start+size) along the last axis."""
    a = as_tensor(a)
    if start < 0 or start + size > a.data.shape[-1]:
        raise ShapeError("narrow_last slice out of range")
    data = a.data[..., start : start + size]

    def bw(g):
        z = np.zeros_like(a.data)
        z[..., start : start + size] = g
        return (z,)

    return _from_op(data, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax (max-subtracted) along ``axis``."""
    a = as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _from_op(data, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Fused log(softmax), stable for large-magnitude logits."""
    a = as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def bw(g):
        p = np.exp(data)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _from_op(data, (a,), bw)


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padding convolution on [B,H,W,Cin] with kernel [3,3,Cin,Cout]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd = x.data, w.data
    if xd.ndim != 4:
        raise ShapeError("conv3x3 input must be [B,H,W,Cin]")
    if wd.shape[:2] != (3, 3) or wd.shape[2] != xd.shape[3]:
        raise ShapeError("conv3x3 kernel must be [3,3,Cin,Cout] matching input channels")
    B, H, W, cin = xd.shape
    cout = wd.shape[3]
    xp = np.zeros((B, H + 2, W + 2, cin), dtype=xd.dtype)
    xp[:, 1:-1, 1:-1, :] = xd
    cols = np.empty((B, H, W, 3, 3, cin), dtype=xd.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di, dj, :] = xp[:, di : di + H, dj : dj + W, :]
    flat = cols.reshape(B * H * W, 9 * cin)
    data = (flat @ wd.reshape(9 * cin, cout) + b.data).reshape(B, H, W, cout)

    def bw(g):
        gf = g.reshape(B * H * W, cout)
        gw = (flat.T @ gf).reshape(3, 3, cin, cout)
        gb = gf.sum(axis=0)
        gcols = (gf @ wd.reshape(9 * cin, cout).T).reshape(B, H, W, 3, 3, cin)
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                gxp[:, di : di + H, dj : dj + W, :] += gcols[:, :, :, di, dj, :]
        return gxp[:, 1:-1, 1:-1, :], gw, gb

    return _from_op(data, (x, w, b), bw)


def affine_last(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Dense map over the last axis: [..., Cin] @ [Cin, Cout] + [Cout]."""
    x, w = as_tensor(x), as_tensor(w)
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, x.data.shape[-1]))
    out = add(matmul(flat, w), b)
    return reshape(out, lead + (w.data.shape[-1],))


def finite_difference_gradient(f, x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x; the oracle for all ops."""
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate() -> float:
        out = f(x)
        v = float(out.data) if isinstance(out, Tensor) else float(out)
        if not np.isfinite(v):
            raise OracleError("objective returned a non-finite value during probing")
        return v

    grad = np.zeros_like(x.data)
    it = np.nditer(x.data, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = x.data[ix]
        x.data[ix] = orig + eps
        fp = evaluate()
        x.data[ix] = orig - eps
        fm = evaluate()
        x.data[ix] = orig
        grad[ix] = (fp - fm) / (2.0 * eps)
        it.iternext()
    return grad


def check_gradient(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max |reverse-mode - central difference| normalized by the oracle scale."""
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    numeric = finite_difference_gradient(f, x, eps)
    scale = max(np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)
