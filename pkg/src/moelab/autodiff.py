"""Small reverse-mode autodiff over numpy arrays.

The graph is rebuilt on every forward pass. Each op returns a ``Tensor`` that
remembers its parents and a closure that pushes the output gradient back to
them; ``backward`` walks the recorded nodes in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its precondition."""


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for grad checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (held-out evaluation)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data: np.ndarray = arr
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _make(a.data**exponent, (a,), bw)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * y)

    return _make(y, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def silu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    y = a.data * sig

    def bw(g):
        _accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(y, (a,), bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    a = as_tensor(a)
    mask = np.broadcast_to(mask, a.shape)

    def bw(g):
        _accumulate(a, np.where(mask, 0.0, g))

    return _make(np.where(mask, np.asarray(value, a.data.dtype), a.data), (a,), bw)


# ----------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def slice_rows(a: Tensor, stop: int) -> Tensor:
    """``a[:stop]`` along the first axis."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[:stop] = g
        _accumulate(a, full)

    return _make(a.data[:stop], (a,), bw)


# ----------------------------------------------------------------------------
# indexing: gather/scatter used by embeddings and expert dispatch


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[index]`` along axis 0; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(a.data[index], (a,), bw)


def scatter_add_rows(n_rows: int, index: np.ndarray, src: Tensor) -> Tensor:
    """Zeros of ``(n_rows, *src.shape[1:])`` with ``src[j]`` added into row ``index[j]``."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.data.dtype)
    np.add.at(out, index, src.data)

    def bw(g):
        _accumulate(src, g[index])

    return _make(out, (src,), bw)


def take_along(a: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        idx = list(np.indices(index.shape, sparse=True))
        idx[axis % a.ndim] = index
        np.add.at(full, tuple(idx), g)
        _accumulate(a, full)

    return _make(np.take_along_axis(a.data, index, axis), (a,), bw)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw)


# ----------------------------------------------------------------------------
# fused nonlinearities with hand-written backward rules


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), bw)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    y = np.log(s) + m
    p = np.exp(a.data - y)

    def bw(g):
        _accumulate(a, np.expand_dims(g, axis) * p)

    return _make(np.squeeze(y, axis=axis), (a,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` (tokens, vocab)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy expects (tokens, vocab) logits matching targets, got {logits.shape} and {targets.shape}")
    vocab = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(targets.shape[0])
    n = targets.shape[0]
    loss = -logp[rows, targets].sum() / n

    def bw(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        _accumulate(logits, grad * (g / n))

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    x, gain = as_tensor(x), as_tensor(gain)
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    d = x.shape[-1]

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accumulate(x, inv * (gx - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(xhat * gain.data, (x, gain), bw)


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """``(silu(x @ w_gate) * (x @ w_up)) @ w_down``."""
    if w_gate.shape != w_up.shape:
        raise DimensionError(f"gate/up shapes differ: {w_gate.shape} vs {w_up.shape}")
    if w_down.shape != (w_gate.shape[1], w_gate.shape[0]):
        raise DimensionError(f"down projection {w_down.shape} does not invert {w_gate.shape}")
    return matmul(silu(matmul(x, w_gate)) * matmul(x, w_up), w_down)


# ----------------------------------------------------------------------------
# graph traversal


def graph(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` that need gradients, in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it and feeds ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    seed = np.ones_like(loss.data)
    loss.grad = seed
    for node in reversed(graph(loss)):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        # interior nodes only relay gradients; free them once consumed
        node.grad = None
    loss.grad = seed


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
