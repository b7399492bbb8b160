"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node carrying a monotonically
increasing sequence number.  ``backward`` collects the nodes reachable from
the loss and replays them in decreasing sequence order, which is exactly the
reverse of execution order, so each node is visited once and gradients from
multiple consumers are summed before a node propagates further.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

MASK_FILL = -1e30

_seq = itertools.count()
_state = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class DegenerateMaskError(ValueError):
    """Raised when a masked reduction has no valid entries in some row."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def as_tensor(x: ArrayLike) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Operations that cannot turn finite inputs into NaN/Inf skip the scan.
_FINITE_SAFE = frozenset({"reshape", "transpose", "concat", "stack", "index", "where", "clip",
                          "maximum", "minimum", "abs", "relu", "sigmoid", "silu", "softmax",
                          "layer_norm", "l2_normalize", "max", "sin", "cos"})


def _node(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
    if op not in _FINITE_SAFE:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out._seq = -1
    out._released = False
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_seq)
    return out


class Tensor:
    """A float64 array with an optional gradient slot.

    ``data`` is always a contiguous row-major ``np.float64`` array.  Leaves
    created with ``requires_grad=True`` accumulate ``d(loss)/d(leaf)`` into
    ``grad`` on every call to :func:`backward`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.ascontiguousarray(_as_array(data), dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = -1
        self._released = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    # -- method forms ---------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False, mask=None):
        return max_(self, axis, keepdims, mask)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return abs_(self)

    def backward(self) -> None:
        backward(self)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _node(out, (a,), bw, "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError instead
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    """Elementwise logistic function, overflow-safe on both tails."""
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    out = a.data * s

    def bw(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _node(out, (a,), bw, "silu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def clip(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clamp values; the gradient is zero wherever clamping was active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    passed = out == a.data
    return _node(out, (a,), lambda g: (g * passed,), "clip")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _node(np.maximum(a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _node(np.minimum(a.data, b.data), (a, b), bw, "minimum")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _node(np.where(cond, a.data, b.data), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules.

    Backward: ``dA = dC @ B^T`` and ``dB = A^T @ dC``, summed over broadcast
    batch dimensions.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m) if a.ndim > 2 else a.data.T @ g
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / max(count, 1))


def _apply_mask(x: np.ndarray, mask, axis: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=axis if mask.ndim == x.ndim else -1).all():
        raise DegenerateMaskError("every entry of some row is masked")
    return np.where(mask, x, MASK_FILL)


def max_(a, axis: int = -1, keepdims: bool = False, mask=None) -> Tensor:
    """Maximum along ``axis``; gradient goes to the first maximising entry.

    With ``mask`` the maximum is restricted to entries where the mask is
    true; masked entries never receive gradient.
    """
    a = as_tensor(a)
    ax = axis % a.ndim
    x = a.data if mask is None else _apply_mask(a.data, mask, ax)
    idx = np.argmax(x, axis=ax)
    out = np.take_along_axis(x, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def bw(g):
        gx = np.zeros(a.shape)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, np.expand_dims(idx, ax), gk, axis=ax)
        return (gx,)

    return _node(np.ascontiguousarray(out), (a,), bw, "max")


def softmax_rows(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to entries where ``mask`` is true.

    Masked logits are replaced by ``MASK_FILL`` before the row-max shift, so
    their probabilities and gradients are exactly zero.
    """
    x = as_tensor(x)
    ax = axis % x.ndim
    z = x.data if mask is None else _apply_mask(x.data, mask, ax)
    z = z - z.max(axis=ax, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = e * np.asarray(mask, dtype=bool)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


softmax = softmax_rows


def l2_normalize_rows(x, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """Divide each row by ``max(||row||_2, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    ax = axis % x.ndim
    norm = np.sqrt((x.data ** 2).sum(axis=ax, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = x.data / denom

    def bw(g):
        proj = (g * out).sum(axis=ax, keepdims=True)
        return (np.where(big, (g - out * proj) / denom, g / denom),)

    return _node(out, (x,), bw, "l2_normalize")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        if gamma.requires_grad:
            ggam = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gbet = _unbroadcast(g, beta.shape)
        return gx, ggam, gbet

    return _node(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)

    def bw(g):
        return tuple(np.moveaxis(g, ax, 0))

    return _node(np.stack([t.data for t in ts], axis=ax), ts, bw, "stack")


def index(a, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)
    out = np.ascontiguousarray(a.data[idx])

    def bw(g):
        gx = np.zeros(a.shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (a,), bw, "index")


def gather_rows(x, rows: np.ndarray) -> Tensor:
    """Select ``x[b, rows[b, k]]`` for a batched ``[B, T, C]`` tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    batch = np.arange(rows.shape[0])[:, None]
    return index(x, (batch, rows))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Propagate ``d(loss)/d(leaf)`` into every ``requires_grad`` leaf.

    The recorded nodes are processed once each, in reverse execution order,
    and released afterwards.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    if loss._released:
        raise ValueError("the tape behind this loss was already consumed by backward")

    if loss._backward is None:
        loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
        return

    nodes = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        for p in t._parents:
            if p.requires_grad and id(p) not in nodes:
                stack_.append(p)

    ordered = sorted((t for t in nodes.values() if t._backward is not None),
                     key=lambda t: t._seq, reverse=True)
    grads = {id(loss): np.ones(loss.shape)}
    for t in ordered:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if p._backward is None:
                gp = np.asarray(gp, dtype=np.float64).reshape(p.shape)
                p.grad = gp.copy() if p.grad is None else p.grad + gp
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
        t._parents = ()
        t._backward = None
        t._released = True
