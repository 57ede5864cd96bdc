"""A small reverse-mode automatic differentiation engine over numpy arrays.

Operations executed while a :class:`GradientTape` is active are recorded
together with a vector-Jacobian product closure. ``tape.backward(loss)``
replays the record in reverse and accumulates gradients for every tensor
with ``requires_grad=True``.

    >>> w = parameter(np.ones((2, 2)))
    >>> with GradientTape() as tape:
    ...     loss = sum_all(matmul(w, w))
    >>> grads = tape.backward(loss)
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradientTape",
    "parameter",
    "constant",
    "default_dtype",
    "get_default_dtype",
    "custom_op",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "affine",
    "softmax_rows",
    "softmax",
    "layer_norm",
    "gelu",
    "reshape",
    "permute",
    "swapaxes",
    "concat",
    "split",
    "index",
    "take",
    "gather_windows",
    "scatter_windows",
    "roll",
    "sum_all",
    "mean_all",
    "two_channel_magnitude",
    "l1_loss",
    "grad_check",
    "EPS_MAG",
]

EPS_MAG = 1e-12

_DEFAULT_DTYPE = [np.float32]
_TAPES: list["GradientTape"] = []


def get_default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    """A trainable leaf tensor (always a fresh copy in the default dtype)."""
    dtype = dtype or get_default_dtype()
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(np.asarray(data, dtype=dtype or get_default_dtype()))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# tape


class GradientTape:
    """Records differentiable operations for a single backward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._used = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
        """Reverse-replay the tape from a scalar ``loss``.

        Gradients are written to ``.grad`` of every leaf that requires grad.
        When ``params`` is given, their gradients are returned in order (zeros
        for parameters the loss does not depend on). The tape is released
        afterwards; a second call raises ``RuntimeError``.
        """
        if self._used:
            raise RuntimeError("backward already called on this tape; record a new one")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("loss is not finite")
        self._used = True
        produced = {id(out) for out, _, _ in self._nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.dtype != t.data.dtype:
                    gi = gi.astype(t.data.dtype)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    if key not in produced:
                        leaves[key] = t
        self._nodes = []
        for key, t in leaves.items():
            g = np.asarray(grads[key]).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g
        if params is None:
            return None
        return [
            np.zeros(p.shape, dtype=np.float64) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
            for p in params
        ]


def _recording(*inputs: Tensor) -> GradientTape | None:
    if not _TAPES:
        return None
    for t in inputs:
        if t.requires_grad:
            return _TAPES[-1]
    return None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _recording(*inputs)
    out = Tensor(data, requires_grad=tape is not None, dtype=data.dtype)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def custom_op(inputs: Sequence[Tensor], data: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap a numpy computation as a differentiable op.

    ``vjp(g)`` must return one gradient (or ``None``) per input.
    """
    return _make(data, tuple(inputs), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    out = (x * cdf).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * (cdf + x * pdf),))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), vjp)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine shape mismatch: input dim {x.shape[-1]} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data
    lead = xd.reshape(-1, xd.shape[-1])

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = (lead.T @ g2) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting the row maximum."""
    return softmax(a, axis=-1)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        ggain = _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        gx = None
        if a.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out.astype(x.dtype, copy=False), (a, gain, bias), vjp)


# --------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def split(a: Tensor, sections: int | Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split like ``np.split``; each piece is a differentiable slice."""
    n = a.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ValueError(f"cannot split axis of length {n} into {sections} equal parts")
        step = n // sections
        bounds = [(i * step, (i + 1) * step) for i in range(sections)]
    else:
        edges = [0, *sections, n]
        bounds = list(zip(edges[:-1], edges[1:]))
    ax = axis % a.ndim
    out = []
    for lo, hi in bounds:
        key = (slice(None),) * ax + (slice(lo, hi),)
        out.append(index(a, key))
    return out


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back with ``np.add.at``."""
    src_shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=g.dtype if g.dtype.kind == "f" else dtype)
        np.add.at(full, key, g)
        return (full,)

    return _make(a.data[key], (a,), vjp)


def take(a: Tensor, idx: np.ndarray, axis: int, inverse: np.ndarray | None = None) -> Tensor:
    """``np.take`` along ``axis``. Pass ``inverse`` when ``idx`` is a permutation."""
    idx = np.asarray(idx)

    def vjp(g):
        if inverse is not None:
            return (np.take(g, inverse, axis=axis),)
        full = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(a.data, idx, axis=axis), (a,), vjp)


def gather_windows(a: Tensor, order: np.ndarray, axis: int = -2) -> Tensor:
    """Regroup tokens by a permutation ``order`` (window-major layout)."""
    order = np.asarray(order)
    return take(a, order, axis, inverse=np.argsort(order))


def scatter_windows(a: Tensor, order: np.ndarray, axis: int = -2) -> Tensor:
    """Inverse of :func:`gather_windows` for the same ``order``."""
    order = np.asarray(order)
    return take(a, np.argsort(order), axis, inverse=order)


def roll(a: Tensor, shift, axis) -> Tensor:
    shift_neg = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return _make(np.roll(a.data, shift, axis=axis), (a,), lambda g: (np.roll(g, shift_neg, axis=axis),))


# --------------------------------------------------------------------------
# reductions and losses (accumulated in float64)


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(dtype=np.float64))
    return _make(out, (a,), lambda g: (np.broadcast_to(g, src),))


def mean_all(a: Tensor) -> Tensor:
    src, n = a.shape, a.size
    out = np.asarray(a.data.mean(dtype=np.float64))
    return _make(out, (a,), lambda g: (np.broadcast_to(g / n, src),))


def two_channel_magnitude(a: Tensor, axis: int = -3) -> Tensor:
    """``sqrt(re^2 + im^2 + EPS_MAG^2)`` of a tensor with a length-2 channel axis."""
    if a.shape[axis] != 2:
        raise ValueError(f"expected 2 channels on axis {axis}, got shape {a.shape}")
    re = np.take(a.data, 0, axis=axis)
    im = np.take(a.data, 1, axis=axis)
    mag = np.sqrt(re * re + im * im + EPS_MAG ** 2)

    def vjp(g):
        return (np.stack([g * re / mag, g * im / mag], axis=axis),)

    return _make(mag, (a,), vjp)


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute error; the subgradient at a zero residual is 0."""
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ValueError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    r = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = r.size
    sgn = np.sign(r) / n

    def vjp(g):
        ga = g * sgn
        return ga, -ga

    return _make(np.asarray(np.abs(r).mean()), (a, b), vjp)


# --------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4, *, indices: Iterable[int] | None = None,
               atol: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor; ``x`` is evaluated in float64.
    The per-entry error is ``|a - n| / max(|a|, |n|, atol)``. ``indices``
    restricts the check to a subset of flat positions.
    """
    with default_dtype(np.float64):
        base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        p = parameter(base)
        with GradientTape() as tape:
            out = f(p)
        (analytic,) = tape.backward(out, [p])
        flat = base.reshape(-1)
        positions = range(flat.size) if indices is None else indices
        worst = 0.0
        for i in positions:
            old = flat[i]
            flat[i] = old + eps
            fp = f(constant(base.copy())).item()
            flat[i] = old - eps
            fm = f(constant(base.copy())).item()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            ana = analytic.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), atol)
            worst = max(worst, err)
        return worst
