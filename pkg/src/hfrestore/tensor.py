"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient.  Outside a tape everything runs as
plain numpy (inference mode)::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = tsum(w * w)
    tape.backward(loss)
    w.grad  # -> array([2., 2., 2.])
"""
from __future__ import annotations

import builtins
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import fft as _fft
from .errors import ConfigurationError, ContractError, ShapeError, TapeExhaustedError

LN_EPS = 1e-6

_state = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; tapes nest and only the innermost one records.
    A tape supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.exhausted = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        if self.exhausted:
            raise TapeExhaustedError("cannot record on a tape after backward()")
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.exhausted:
            raise TapeExhaustedError("backward() already ran on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        produced = {id(n.out) for n in self.nodes}
        if id(loss) not in produced:
            raise ContractError("loss was not produced on this tape")
        self.exhausted = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        nodes, self.nodes = self.nodes, []
        for node in reversed(nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=np.float64)
                else:
                    t.grad = t.grad + gi


def current_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    tape = current_tape()
    if tape is not None and builtins.any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                              _unbroadcast(g, b.shape) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                              _unbroadcast(-g, b.shape) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    # constant operands (scales, masks) skip their gradient product
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5 x^2 inside ``|x| < delta`` (scaled by 1/delta), linear outside."""
    d = x.data
    inside = np.abs(d) < delta
    out = np.where(inside, 0.5 * d * d / delta, np.abs(d) - 0.5 * delta)
    return _result(out, (x,), lambda g: (g * np.where(inside, d / delta, np.sign(d)),))


# ---------------------------------------------------------------------------
# reductions and shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(out, dtype=np.float64), (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _result(np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _result(x.data[sl], (x,), grad_fn)


def split(x: Tensor, parts, axis: int = 0) -> list[Tensor]:
    """Split into ``parts`` equal chunks (int) or chunks of the given sizes (sequence)."""
    n = x.shape[axis]
    if isinstance(parts, int):
        if n % parts:
            raise ShapeError(f"axis of length {n} does not split into {parts} equal parts")
        sizes = [n // parts] * parts
    else:
        sizes = list(parts)
        if builtins.sum(sizes) != n:
            raise ShapeError(f"split sizes {sizes} do not sum to {n}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, axis))
        start += s
    return out


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} invalid for shape {x.shape}")
    out = x.data - np.max(x.data, axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= np.sum(out, axis=axis, keepdims=True)

    def grad_fn(g):
        gx = g * out
        gx -= out * np.sum(gx, axis=axis, keepdims=True)
        return (gx,)

    return _result(out, (x,), grad_fn)


# score blocks larger than this many entries are processed in row chunks,
# which keeps the working set in cache for 1024-token attention
_ATTN_BLOCK = 1 << 16


def _attn_rows(q, k, v, prob):
    """Fill ``prob`` with softmax(q k^T) and return prob @ v; q is pre-scaled."""
    np.matmul(q, np.swapaxes(k, -1, -2), out=prob)
    prob -= np.max(prob, axis=-1, keepdims=True)
    np.exp(prob, out=prob)
    prob /= np.sum(prob, axis=-1, keepdims=True)
    return np.matmul(prob, v)


def _attn_rows_grad(prob, g, q, k, v):
    """(dq, dk, dv) contributions of one block of rows, before the scale factor on dq/dk."""
    ds = np.matmul(g, np.swapaxes(v, -1, -2))
    ds -= np.sum(ds * prob, axis=-1, keepdims=True)
    ds *= prob
    return (np.matmul(ds, k), np.matmul(np.swapaxes(ds, -1, -2), q),
            np.matmul(np.swapaxes(prob, -1, -2), g))


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """softmax(scale * q k^T) v over the last two axes, as one tape node.

    q: [..., Lq, d], k: [..., Lk, d], v: [..., Lk, dv]; leading axes broadcast.
    Only the probability matrix is kept for backward.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2 or q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes do not fit: q {q.shape}, k {k.shape}, v {v.shape}")
    try:
        lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"attention batch axes not broadcastable: {q.shape}, {k.shape}, {v.shape}") from exc
    (lq, d), lk, dv = q.shape[-2:], k.shape[-2], v.shape[-1]
    flat = lambda a, tail: np.broadcast_to(a, lead + tail).reshape((-1,) + tail)
    qs, ks, vs = flat(q.data * scale, (lq, d)), flat(k.data, (lk, d)), flat(v.data, (lk, dv))
    nb = qs.shape[0]
    prob = np.empty((nb, lq, lk))
    if lq * lk <= _ATTN_BLOCK:
        out = _attn_rows(qs, ks, vs, prob)
        blocks = None
    else:
        rows = max(1, _ATTN_BLOCK // lk)
        blocks = [(b, r, min(r + rows, lq)) for b in range(nb) for r in range(0, lq, rows)]
        out = np.empty((nb, lq, dv))
        for b, r0, r1 in blocks:
            out[b, r0:r1] = _attn_rows(qs[b, r0:r1], ks[b], vs[b], prob[b, r0:r1])

    def grad_fn(g):
        g = g.reshape(nb, lq, dv)
        if blocks is None:
            gq, gk, gv = _attn_rows_grad(prob, g, qs, ks, vs)
        else:
            gq, gk, gv = np.empty_like(qs), np.zeros_like(ks), np.zeros_like(vs)
            for b, r0, r1 in blocks:
                dq, dk, dvb = _attn_rows_grad(prob[b, r0:r1], g[b, r0:r1], qs[b, r0:r1], ks[b], vs[b])
                gq[b, r0:r1] = dq
                gk[b] += dk
                gv[b] += dvb
        unflat = lambda a, t: _unbroadcast(a.reshape(lead + a.shape[1:]), t.shape) if t.requires_grad else None
        # d(scale*q)/dq = scale; the keys saw scaled queries, so their gradient already carries it
        return unflat(gq * scale, q), unflat(gk, k), unflat(gv, v)

    return _result(out.reshape(lead + (lq, dv)), (q, k, v), grad_fn)


def layernorm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
              axis: int = 0, eps: float = LN_EPS) -> Tensor:
    """Normalize across ``axis`` (the channel axis for [C, H, W] maps), then scale and shift.

    ``weight`` and ``bias`` have length ``x.shape[axis]`` and broadcast along it.
    """
    axis = axis % x.ndim
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[axis]

    def grad_fn(g):
        return (inv * (g - g.mean(axis=axis, keepdims=True)
                       - xhat * (g * xhat).mean(axis=axis, keepdims=True)),)

    y = _result(xhat, (x,), grad_fn)
    bshape = [1] * x.ndim
    bshape[axis] = n
    if weight is not None:
        y = mul(y, reshape(weight, bshape))
    if bias is not None:
        y = add(y, reshape(bias, bshape))
    return y


# ---------------------------------------------------------------------------
# permutations


@dataclass(frozen=True)
class SortIndex:
    """Per-slice permutation produced by an ascending stable sort along ``axis``."""

    order: np.ndarray
    axis: int

    def inverse(self) -> "SortIndex":
        return SortIndex(np.argsort(self.order, axis=self.axis, kind="stable"), self.axis)

    def tile(self, reps: int, along: int = 0) -> "SortIndex":
        """Repeat the index ``reps`` times along a non-sorted axis (e.g. Q and K sharing V's order)."""
        return SortIndex(np.concatenate([self.order] * reps, axis=along), self.axis)


class record_orders:
    """Context manager collecting every permutation produced by ``sort_with_index``.

    Finite-difference checks use it to tell whether a perturbation changed
    an ordering, in which case the difference quotient straddles a jump.
    """

    def __enter__(self) -> list:
        self.orders: list = []
        self._prev = getattr(_state, "orders", None)
        _state.orders = self.orders
        return self.orders

    def __exit__(self, *exc) -> None:
        _state.orders = self._prev


def sort_with_index(x: Tensor, axis: int = -1) -> tuple[Tensor, SortIndex]:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"sort axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    order = np.argsort(x.data, axis=axis, kind="stable")
    idx = SortIndex(order, axis)
    recorder = getattr(_state, "orders", None)
    if recorder is not None:
        recorder.append(order)
    return gather(x, idx, check=False), idx


def _check_index(order: np.ndarray, n: int, permutation: bool) -> None:
    if order.size and (order.min() < 0 or order.max() >= n):
        raise IndexError(f"gather index out of range for axis length {n}")
    if permutation and not np.array_equal(np.sort(order, axis=-1),
                                          np.broadcast_to(np.arange(n), order.shape)):
        raise IndexError("gather index is not a permutation of each slice")


def gather(x: Tensor, idx: SortIndex, check: bool = True) -> Tensor:
    """out[..., i, ...] = x[..., order[i], ...] along ``idx.axis``; backward scatters by the inverse."""
    axis = idx.axis
    if idx.order.shape != x.shape:
        raise ShapeError(f"index shape {idx.order.shape} does not match tensor shape {x.shape}")
    if check:
        _check_index(np.moveaxis(idx.order, axis, -1), x.shape[axis], permutation=True)
    out = np.take_along_axis(x.data, idx.order, axis=axis)

    def grad_fn(g):
        full = np.empty_like(g)
        np.put_along_axis(full, idx.order, g, axis=axis)
        return (full,)

    return _result(out, (x,), grad_fn)


def scatter(x: Tensor, idx: SortIndex) -> Tensor:
    """Inverse of :func:`gather`: out[..., order[i], ...] = x[..., i, ...]."""
    if idx.order.shape != x.shape:
        raise ShapeError(f"index shape {idx.order.shape} does not match tensor shape {x.shape}")
    order, axis = idx.order, idx.axis
    out = np.empty_like(x.data)
    np.put_along_axis(out, order, x.data, axis=axis)
    return _result(out, (x,), lambda g: (np.take_along_axis(g, order, axis=axis),))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select (possibly repeated) positions along one axis; backward sums repeats."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    _check_index(indices, x.shape[axis], permutation=False)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        return (full,)

    return _result(np.take(x.data, indices, axis=axis), (x,), grad_fn)


# ---------------------------------------------------------------------------
# convolution and resampling

_KSIZES = (1, 3, 5, 7)


def _pad_hw(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (p, p), (p, p))) if p else a


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, mode: str = "full",
           stride: int = 1) -> Tensor:
    """Same-padded 2-D convolution (cross-correlation) on a [C, H, W] map.

    Weight layouts: ``pointwise`` [C_out, C_in]; ``depthwise`` [C, k, k];
    ``full`` [C_out, C_in, k, k].  ``stride`` is only supported for ``full``.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects [C, H, W], got {x.shape}")
    c_in, h, wd = x.shape
    if mode == "pointwise":
        if w.ndim != 2 or w.shape[1] != c_in:
            raise ShapeError(f"pointwise weight {w.shape} incompatible with input {x.shape}")
        out = _pointwise(x, w)
    elif mode == "depthwise":
        if w.ndim != 3 or w.shape[0] != c_in or w.shape[1] != w.shape[2]:
            raise ShapeError(f"depthwise weight {w.shape} incompatible with input {x.shape}")
        if w.shape[1] not in _KSIZES:
            raise ConfigurationError(f"unsupported kernel size {w.shape[1]}; expected one of {_KSIZES}")
        out = _depthwise(x, w)
    elif mode == "full":
        if w.ndim != 4 or w.shape[1] != c_in or w.shape[2] != w.shape[3]:
            raise ShapeError(f"full conv weight {w.shape} incompatible with input {x.shape}")
        if w.shape[2] not in _KSIZES:
            raise ConfigurationError(f"unsupported kernel size {w.shape[2]}; expected one of {_KSIZES}")
        out = _full(x, w, stride)
    else:
        raise ConfigurationError(f"unknown conv mode {mode!r}")
    if mode != "full" and stride != 1:
        raise ConfigurationError("stride is only supported for full convolutions")
    if b is not None:
        out = add(out, reshape(b, (-1, 1, 1)))
    return out


def _pointwise(x: Tensor, w: Tensor) -> Tensor:
    c, h, wd = x.shape
    flat = x.data.reshape(c, h * wd)
    out = (w.data @ flat).reshape(-1, h, wd)

    def grad_fn(g):
        g2 = g.reshape(g.shape[0], -1)
        return (w.data.T @ g2).reshape(x.shape), g2 @ flat.T

    return _result(out, (x, w), grad_fn)


# per-channel scipy filtering beats shifted-slice sums once maps are this large
_NDIMAGE_MIN_PIXELS = 1024


def _depthwise_apply(a: np.ndarray, w: np.ndarray, flip: bool) -> np.ndarray:
    """Zero-padded same-size per-channel correlation (convolution if ``flip``)."""
    c, h, wd = a.shape
    k = w.shape[1]
    p = k // 2
    if h * wd >= _NDIMAGE_MIN_PIXELS:
        op = ndimage.convolve if flip else ndimage.correlate
        return np.stack([op(a[i], w[i], mode="constant", cval=0.0) for i in range(c)])
    ap = _pad_hw(a, p)
    out = np.zeros_like(a)
    for i in range(k):
        for j in range(k):
            ii, jj = (k - 1 - i, k - 1 - j) if flip else (i, j)
            out += w[:, ii, jj, None, None] * ap[:, i:i + h, j:j + wd]
    return out


def _depthwise(x: Tensor, w: Tensor) -> Tensor:
    c, h, wd = x.shape
    k = w.shape[1]
    p = k // 2
    out = _depthwise_apply(x.data, w.data, flip=False)

    def grad_fn(g):
        gx = _depthwise_apply(g, w.data, flip=True) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            xp = _pad_hw(x.data, p)
            gw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    gw[:, i, j] = np.einsum("chw,chw->c", g, xp[:, i:i + h, j:j + wd])
        return gx, gw

    return _result(out, (x, w), grad_fn)


def _full(x: Tensor, w: Tensor, stride: int) -> Tensor:
    c, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = k // 2
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    xp = _pad_hw(x.data, p)
    cols = np.empty((c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * k * k, ho * wo)
    wmat = w.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, ho, wo)

    def grad_fn(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gcols = (wmat.T @ g2).reshape(c, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, p:p + h, p:p + wd] if p else gxp
        return gx, gw

    return _result(out, (x, w), grad_fn)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, scale: float) -> Tensor:
    """Bilinear resampling of a [C, H, W] map by 2 (up) or 0.5 (down)."""
    if scale not in (2, 0.5):
        raise ConfigurationError(f"bilinear_resize supports scale 2 or 0.5, got {scale}")
    c, h, wd = x.shape
    ho, wo = int(h * scale), int(wd * scale)
    if ho < 1 or wo < 1 or (scale == 0.5 and (h % 2 or wd % 2)):
        raise ShapeError(f"cannot resize {x.shape} by {scale}")
    rh, rw = _interp_matrix(h, ho), _interp_matrix(wd, wo)
    out = rh @ x.data @ rw.T
    return _result(out, (x,), lambda g: (rh.T @ g @ rw,))


# ---------------------------------------------------------------------------
# spectral


def fft2_realimag(x: Tensor) -> Tensor:
    """[C, H, W] -> [C, 2, H, W] holding real and imaginary planes of the unnormalized 2-D DFT."""
    if x.ndim != 3:
        raise ShapeError(f"fft2_realimag expects [C, H, W], got {x.shape}")
    h, w = x.shape[1:]
    if not (_fft.is_power_of_two(h) and _fft.is_power_of_two(w)):
        raise ConfigurationError(f"FFT needs power-of-two sizes, got {h}x{w}")
    z = _fft.fft2(x.data)
    out = np.stack([z.real, z.imag], axis=1)

    def grad_fn(g):
        # adjoint of a real-input DFT: Re(F conj(G)) with F symmetric
        return (_fft.fft2(g[:, 0] - 1j * g[:, 1]).real,)

    return _result(out, (x,), grad_fn)
