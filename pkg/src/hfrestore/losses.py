"""Training objective and image-quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

PSNR_INF = math.inf


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.04
    beta: float = 0.004

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def _check(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")


def smooth_l1(pred: Tensor, target) -> Tensor:
    target = T.as_tensor(target)
    _check(pred, target)
    return T.mean(T.huber(pred - target))


def mse(pred: Tensor, target) -> Tensor:
    target = T.as_tensor(target)
    _check(pred, target)
    e = pred - target
    return T.mean(e * e)


class PerceptualExtractor:
    """Frozen random conv pyramid standing in for VGG16 features.

    Six 3x3 convs (two per scale, 2x average-pool between scales) with
    He-normal weights from ``seed``; features are tapped after each pair.
    """

    def __init__(self, seed: int = 1234, widths=(8, 16, 32)):
        rng = np.random.default_rng(seed)
        self.layers: list[tuple[Tensor, Tensor]] = []
        c_in = 3
        for c in widths:
            for _ in range(2):
                std = math.sqrt(2.0 / (9 * c_in))
                self.layers.append((Tensor(rng.normal(0.0, std, (c, c_in, 3, 3))),
                                    Tensor(rng.normal(0.0, 0.01, (c,)))))
                c_in = c

    def __call__(self, x: Tensor) -> list[Tensor]:
        taps = []
        for i, (w, b) in enumerate(self.layers):
            if i and i % 2 == 0:
                x = T.bilinear_resize(x, 0.5)
            x = T.relu(T.conv2d(x, w, b))
            if i % 2 == 1:
                taps.append(x)
        return taps


def perceptual_loss(pred: Tensor, target, extractor: PerceptualExtractor) -> Tensor:
    """Sum over the three taps of the feature MSE."""
    target = T.as_tensor(target)
    _check(pred, target)
    total = None
    for fp, ft in zip(extractor(pred), extractor(target)):
        term = mse(fp, ft)
        total = term if total is None else total + term
    return total


def frequency_loss(pred: Tensor, target) -> Tensor:
    """MSE between stacked real/imaginary spectra of each channel."""
    target = T.as_tensor(target)
    _check(pred, target)
    return mse(T.fft2_realimag(pred), T.fft2_realimag(target))


def total_loss(pred: Tensor, target, weights: LossWeights = LossWeights(),
               extractor: PerceptualExtractor | None = None, terms: dict | None = None) -> Tensor:
    """smooth_l1 + lam * perceptual + beta * frequency.

    If ``terms`` is a dict, the three unweighted term values are stored in it.
    """
    target = T.as_tensor(target)
    extractor = extractor or default_extractor()
    l1 = smooth_l1(pred, target)
    perc = perceptual_loss(pred, target, extractor)
    freq = frequency_loss(pred, target)
    if terms is not None:
        terms.update(l1=float(l1.data), perc=float(perc.data), freq=float(freq.data))
    return l1 + weights.lam * perc + weights.beta * freq


_DEFAULT_EXTRACTOR: PerceptualExtractor | None = None


def default_extractor() -> PerceptualExtractor:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = PerceptualExtractor()
    return _DEFAULT_EXTRACTOR


# ---------------------------------------------------------------------------
# metrics (plain numpy)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr operands differ: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / err)


SSIM_WINDOW = 8
SSIM_STRIDE = 4


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over 8x8 windows at stride 4 on channel-mean grayscale, unit peak."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim operands differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=0), b.mean(axis=0)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    win = min(SSIM_WINDOW, *a.shape)
    wa = np.lib.stride_tricks.sliding_window_view(a, (win, win))[::SSIM_STRIDE, ::SSIM_STRIDE]
    wb = np.lib.stride_tricks.sliding_window_view(b, (win, win))[::SSIM_STRIDE, ::SSIM_STRIDE]
    mu_a, mu_b = wa.mean(axis=(-1, -2)), wb.mean(axis=(-1, -2))
    var_a = wa.var(axis=(-1, -2))
    var_b = wb.var(axis=(-1, -2))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-1, -2))
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())
