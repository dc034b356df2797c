"""Dense tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back into them. The tape lives only
as long as the graph is referenced; :func:`backward` walks it once and then
cuts every link so intermediates can be collected.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. ``np.float64``)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        # owned: g is a fresh array nobody else holds, so it can be adopted
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.shape == self.data.shape and g.flags.writeable:
                self.grad = g
            else:
                self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


class Parameter(Tensor):
    """Trainable leaf. ``grad`` is always allocated and has the value's shape."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        if self.requires_grad:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad[...] = 0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Populate ``grad`` of every parameter reachable from scalar ``root``.

    Intermediate nodes are detached from the tape afterwards.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)

        def bw_const(g):
            a._accumulate(_unbroadcast(g * c, a.shape), owned=True)

        return _node(a.data * c, (a,), bw_const)
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return _node(a.data * b.data, (a, b), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(2.0 * x.data * g, owned=True)

    return _node(x.data * x.data, (x,), bw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        x._accumulate(g * (s * (1.0 + x.data * (1.0 - s))), owned=True)

    return _node(x.data * s, (x,), bw)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    z = x.data
    z2 = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner), owned=True)

    return _node(0.5 * z * (1.0 + t), (x,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        x._accumulate(np.ascontiguousarray(g.transpose(inv)), owned=True)

    return _node(x.data.transpose(axes), (x,), bw)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def take_rows(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``weight[ids]``."""
    ids = np.asarray(ids)

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        weight._accumulate(gw)

    return _node(weight.data[ids], (weight,), bw)


def slice_rows(x: Tensor, stop: int) -> Tensor:
    """``x[:stop]`` along the first axis."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[:stop] = g
        x._accumulate(full)

    return _node(x.data[:stop], (x,), bw)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _node(np.asarray(x.data.sum() / n, dtype=x.data.dtype), (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, numpy broadcasting on the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    flat = a.ndim > 2 and b.ndim == 2
    if flat:
        # one large GEMM instead of a broadcast loop of small ones
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def bw(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape), owned=True)
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g2, owned=True)
            return
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape), owned=True)

    return _node(out, (a, b), bw)


# ---------------------------------------------------------------- fused layers


def softmax_rows_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``additive_mask`` is added to the logits first."""
    z = x.data if additive_mask is None else x.data + additive_mask
    p = softmax_rows_np(z)

    def bw(g):
        x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)), owned=True)

    return _node(p, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    n = x.shape[-1]
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def bw(g):
        if gain is not None and gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data if gain is not None else g
            dx = (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n) * rstd
            x._accumulate(dx, owned=True)

    return _node(out.astype(x.data.dtype, copy=False), parents, bw)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood (nats) of ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    flat = logits.data.reshape(-1, logits.shape[-1])
    tflat = targets.reshape(-1)
    if flat.shape[0] != tflat.shape[0]:
        raise ShapeError(f"cross_entropy: {flat.shape[0]} rows vs {tflat.shape[0]} targets")
    vocab = flat.shape[1]
    if tflat.size and (tflat.min() < 0 or tflat.max() >= vocab):
        raise IndexError(f"target id out of range for vocabulary of size {vocab}")
    lsm = log_softmax_np(flat)
    rows = np.arange(tflat.size)
    picked = lsm[rows, tflat]
    loss = -np.sum(picked, dtype=np.float64) / tflat.size

    def bw(g):
        d = np.exp(lsm)
        d[rows, tflat] -= 1.0
        logits._accumulate((d * (g / tflat.size)).reshape(logits.shape), owned=True)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    diff = pred.data - t
    n = diff.size

    def bw(g):
        pred._accumulate(diff * (2.0 * g / n), owned=True)

    return _node(np.asarray(np.sum(diff * diff, dtype=np.float64) / n, dtype=pred.data.dtype), (pred,), bw)


def custom(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    """Wrap an externally computed value with a hand-written backward."""
    return _node(np.asarray(data), tuple(parents), backward_fn)


def tune_allocator() -> None:
    """Keep freed large buffers in the heap instead of returning them to the OS.

    Training allocates and frees many multi-megabyte temporaries per step;
    with glibc defaults each one costs fresh page faults.
    """
    import ctypes
    import sys

    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return
    m_trim_threshold, m_mmap_threshold = -1, -3
    libc.mallopt(m_mmap_threshold, 1 << 30)
    libc.mallopt(m_trim_threshold, 1 << 31)
