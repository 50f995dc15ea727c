"""Central finite-difference checks against tape gradients.

Graphs containing sorts are only piecewise smooth.  A coordinate whose
perturbation by +/- step changes any sort permutation has no meaningful
difference quotient; such coordinates are skipped and replaced by others.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-5


def tape_gradients(fn: Callable[..., Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    with T.Tape() as tape:
        out = fn(*tensors)
    tape.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def _evaluate(fn, tensors) -> tuple[float, list]:
    with T.record_orders() as orders:
        value = float(fn(*tensors).data)
    return value, orders


def _same_orders(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def fd_gradient(fn: Callable[..., Tensor], tensors: Sequence[Tensor], which: int, coords,
                step: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar ``fn(*tensors)`` w.r.t. chosen flat coordinates.

    Entries are NaN where the perturbation changes a sort permutation.
    """
    _, base = _evaluate(fn, tensors)
    flat = tensors[which].data.reshape(-1)
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        up, o_up = _evaluate(fn, tensors)
        flat[i] = orig - step
        down, o_down = _evaluate(fn, tensors)
        flat[i] = orig
        smooth = _same_orders(base, o_up) and _same_orders(base, o_down)
        out[n] = (up - down) / (2 * step) if smooth else np.nan
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error relative to the larger of the two gradient magnitudes.

    The scale is taken over every probed coordinate together, so inputs whose
    exact gradient is zero (a key bias under softmax) are judged against the
    function's gradient size rather than against their own rounding noise.
    """
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@dataclass
class CheckResult:
    error: float
    checked: int
    skipped: int


def check_detailed(fn: Callable[..., Tensor], arrays: Sequence, max_coords: Optional[int] = None,
                   seed: int = 0, step: float = FD_STEP) -> CheckResult:
    """Like :func:`check`, also reporting how many coordinates were probed and skipped."""
    rng = np.random.default_rng(seed)
    tensors = [a if isinstance(a, Tensor) else Tensor(np.array(a, dtype=np.float64), requires_grad=True)
               for a in arrays]
    grads = tape_gradients(fn, tensors)
    checked, skipped = 0, 0
    pairs = []
    for i, (t, g) in enumerate(zip(tensors, grads)):
        if not t.requires_grad:
            continue
        want = t.size if max_coords is None else min(max_coords, t.size)
        candidates = np.arange(t.size) if max_coords is None else rng.permutation(t.size)
        coords, nums = [], []
        pos = 0
        while len(coords) < want and pos < t.size:
            chunk = candidates[pos:pos + want - len(coords)]
            pos += len(chunk)
            num = fd_gradient(fn, tensors, i, chunk, step)
            ok = ~np.isnan(num)
            skipped += int((~ok).sum())
            coords.extend(chunk[ok])
            nums.extend(num[ok])
        if coords:
            pairs.append((g.reshape(-1)[np.array(coords)], np.array(nums)))
            checked += len(coords)
    if not pairs:
        return CheckResult(0.0, 0, skipped)
    analytic = np.concatenate([a for a, _ in pairs])
    numeric = np.concatenate([n for _, n in pairs])
    return CheckResult(relative_error(analytic, numeric), checked, skipped)


def check(fn: Callable[..., Tensor], arrays: Sequence, max_coords: Optional[int] = None,
          seed: int = 0, step: float = FD_STEP) -> float:
    """Relative error over all inputs of a scalar-valued ``fn``.

    At most ``max_coords`` randomly chosen coordinates are probed per input.
    """
    return check_detailed(fn, arrays, max_coords, seed, step).error


def projected(fn: Callable[..., Tensor], out_shape, seed: int = 0) -> Callable[..., Tensor]:
    """Reduce a tensor-valued ``fn`` to a scalar via a fixed random weighting of its output."""
    w = np.random.default_rng(seed + 7919).normal(size=out_shape)
    return lambda *xs: T.tsum(fn(*xs) * w)
