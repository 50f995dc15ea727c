"""Seeded synthesis of hazy, rainy and snowy images from clean ones.

Images are float64 arrays of shape [3, H, W] in [0, 1].  Maps (depth,
transmission, masks) are [H, W].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ParameterError
from .fft import is_power_of_two

KINDS = ("haze", "rain", "snow", "rain+haze")


@dataclass
class HazeParams:
    A: float
    beta: float
    depth: np.ndarray

    def transmission(self) -> np.ndarray:
        return np.exp(-self.beta * self.depth)

    def summary(self) -> str:
        return f"A={self.A:.4f};beta={self.beta:.4f};dmax={float(self.depth.max()):.4f}"


@dataclass
class RainLayer:
    angle: float        # degrees from vertical
    length: float       # pixels
    density: float      # per-pixel probability of a streak start
    intensity: float
    blur: float = 1.0   # gaussian sigma along the streak; 0 disables

    def __post_init__(self):
        if not (0.0 <= self.density <= 1.0 and 0.0 <= self.intensity <= 1.0):
            raise ParameterError("rain density and intensity must lie in [0, 1]")
        if self.length < 0 or self.blur < 0:
            raise ParameterError("rain length and blur must be non-negative")


@dataclass
class RainParams:
    layers: tuple
    seed: int = 0

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ParameterError("rain needs at least one streak layer")

    def summary(self) -> str:
        return "layers=" + "|".join(
            f"{l.angle:.1f}/{l.length:.1f}/{l.density:.4f}/{l.intensity:.3f}" for l in self.layers)


@dataclass
class SnowParams:
    T: np.ndarray
    A: float
    R: np.ndarray
    Z: np.ndarray
    C: np.ndarray
    seed: int = 0

    def summary(self) -> str:
        return f"A={self.A:.4f};cover={float(self.R.mean()):.4f};tmin={float(self.T.min()):.4f}"


@dataclass
class ImagePair:
    clean: np.ndarray
    degraded: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)
    seed: Optional[int] = None


def _check_image(j: np.ndarray) -> np.ndarray:
    j = np.asarray(j, dtype=np.float64)
    if j.ndim != 3 or j.shape[0] != 3:
        raise ParameterError(f"expected a [3, H, W] image, got {j.shape}")
    if j.min() < 0.0 or j.max() > 1.0:
        raise ParameterError("clean image values must lie in [0, 1]")
    return j


# ---------------------------------------------------------------------------
# physical models


def haze_model(j: np.ndarray, p: HazeParams) -> np.ndarray:
    """I = J t + A (1 - t), unclamped."""
    t = p.transmission()
    return j * t + p.A * (1.0 - t)


def synth_haze(j: np.ndarray, p: HazeParams) -> ImagePair:
    j = _check_image(j)
    if p.beta <= 0:
        raise ParameterError(f"scattering coefficient beta must be > 0, got {p.beta}")
    if np.any(p.depth < 0):
        raise ParameterError("depth map must be non-negative")
    out = np.clip(haze_model(j, p), 0.0, 1.0)
    return ImagePair(j, out, "haze", {"haze": p.summary()})


def _streak_kernel(angle: float, sigma: float) -> np.ndarray:
    r = max(1, int(math.ceil(3 * sigma)))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    a = math.radians(angle)
    along = yy * math.cos(a) + xx * math.sin(a)
    across = -yy * math.sin(a) + xx * math.cos(a)
    k = np.exp(-0.5 * (along / sigma) ** 2) * np.clip(1.0 - np.abs(across), 0.0, None)
    return k / k.sum()


def streak_mask(shape: tuple[int, int], layer: RainLayer, rng: np.random.Generator) -> np.ndarray:
    """Binary mask of rasterised straight streaks."""
    h, w = shape
    mask = np.zeros((h, w))
    n = rng.binomial(h * w, layer.density)
    if n == 0 or layer.length <= 0:
        return mask
    y0 = rng.uniform(0, h, n)
    x0 = rng.uniform(0, w, n)
    a = math.radians(layer.angle)
    steps = np.arange(0.0, layer.length + 1e-9, 0.5)
    ys = np.rint(y0[:, None] + steps[None, :] * math.cos(a)).astype(int)
    xs = np.rint(x0[:, None] + steps[None, :] * math.sin(a)).astype(int)
    ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    mask[ys[ok], xs[ok]] = 1.0
    return mask


def render_rain_layer(shape: tuple[int, int], layer: RainLayer, rng: np.random.Generator) -> np.ndarray:
    mask = streak_mask(shape, layer, rng)
    if layer.blur > 0:
        mask = ndimage.convolve(mask, _streak_kernel(layer.angle, layer.blur), mode="constant")
    return layer.intensity * mask


def rain_layers(shape: tuple[int, int], p: RainParams) -> list[np.ndarray]:
    return [render_rain_layer(shape, layer, np.random.default_rng([p.seed, i]))
            for i, layer in enumerate(p.layers)]


def rain_model(j: np.ndarray, p: RainParams) -> np.ndarray:
    """I = J + sum_i S_i, unclamped; streaks are achromatic."""
    return j + sum(rain_layers(j.shape[1:], p))[None]


def synth_rain(j: np.ndarray, p: RainParams) -> ImagePair:
    j = _check_image(j)
    return ImagePair(j, np.clip(rain_model(j, p), 0.0, 1.0), "rain", {"rain": p.summary()})


def snow_model(j: np.ndarray, p: SnowParams) -> np.ndarray:
    """K = J (1 - Z R) + C Z R;  I = K T + A (1 - T), unclamped."""
    zr = p.Z * p.R
    k = j * (1.0 - zr) + p.C * zr
    return k * p.T + p.A * (1.0 - p.T)


def synth_snow(j: np.ndarray, p: SnowParams) -> ImagePair:
    j = _check_image(j)
    if not np.all((p.R == 0) | (p.R == 1)):
        raise ParameterError("snow location mask R must be binary")
    if np.any(p.Z < 0) or np.any(p.Z > 1):
        raise ParameterError("snow mask Z must lie in [0, 1]")
    if np.any(p.T <= 0) or np.any(p.T > 1):
        raise ParameterError("snow transmission T must lie in (0, 1]")
    return ImagePair(j, np.clip(snow_model(j, p), 0.0, 1.0), "snow", {"snow": p.summary()})


def synth_rain_haze(j: np.ndarray, rain: RainParams, haze: HazeParams) -> ImagePair:
    """Haze first, then additive rain streaks on top."""
    hazy = synth_haze(j, haze)
    out = np.clip(rain_model(hazy.degraded, rain), 0.0, 1.0)
    return ImagePair(hazy.clean, out, "rain+haze", {"haze": haze.summary(), "rain": rain.summary()})


# ---------------------------------------------------------------------------
# random parameters and scenes


def smooth_noise(shape: tuple[int, int], rng: np.random.Generator, cells: int = 4) -> np.ndarray:
    """Low-frequency noise in [0, 1]: a coarse random grid, bilinearly upsampled."""
    h, w = shape
    grid = rng.random((cells + 1, cells + 1))
    up = ndimage.zoom(grid, (h / (cells + 1), w / (cells + 1)), order=1, mode="nearest")[:h, :w]
    lo, hi = up.min(), up.max()
    return (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)


def random_haze_params(shape, rng: np.random.Generator) -> HazeParams:
    dmax = rng.uniform(1.0, 2.0)
    return HazeParams(A=float(rng.uniform(0.7, 0.95)), beta=float(rng.uniform(0.6, 1.4)),
                      depth=smooth_noise(shape, rng) * dmax)


def random_rain_params(rng: np.random.Generator) -> RainParams:
    angle = rng.uniform(-25, 25)
    layers = tuple(RainLayer(angle=float(angle + rng.uniform(-5, 5)), length=float(rng.uniform(4, 12)),
                             density=float(rng.uniform(0.004, 0.012)),
                             intensity=float(rng.uniform(0.3, 0.7)), blur=1.0)
                   for _ in range(int(rng.integers(1, 4))))
    return RainParams(layers, seed=int(rng.integers(2 ** 31)))


def random_snow_params(shape, rng: np.random.Generator) -> SnowParams:
    h, w = shape
    seed = int(rng.integers(2 ** 31))
    srng = np.random.default_rng(seed)
    n = int(srng.integers(h * w // 60, h * w // 25 + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    R = np.zeros((h, w))
    Z = np.zeros((h, w))
    for cy, cx, rad, alpha in zip(srng.uniform(0, h, n), srng.uniform(0, w, n),
                                  srng.uniform(0.5, 1.8, n), srng.uniform(0.5, 1.0, n)):
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        inside = d2 <= rad * rad
        R[inside] = 1.0
        Z = np.maximum(Z, np.where(inside, alpha * np.exp(-0.5 * d2 / (rad * rad)), 0.0))
    C = srng.uniform(0.85, 1.0, (3, h, w))
    T = 0.75 + 0.25 * smooth_noise(shape, srng)
    T = np.maximum(T, 1e-3)
    return SnowParams(T=T, A=float(srng.uniform(0.7, 0.95)), R=R, Z=np.clip(Z, 0, 1), C=C, seed=seed)


def procedural_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    """Clean [3, size, size] scene: colour gradient, a few flat shapes, a striped texture."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    a = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(a) * xx + np.sin(a) * yy
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) or 1.0)
    c0, c1 = rng.uniform(0.05, 0.6, 3), rng.uniform(0.2, 0.9, 3)
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.0, 1.0, 3)
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            m = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
        else:
            m = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.4, 1.6))
        img[:, m] = color[:, None]
    freq = rng.uniform(4, 12)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.08 * np.sin(2 * np.pi * freq * (xx * np.cos(a) - yy * np.sin(a)) + phase)
    band = (yy > rng.uniform(0.3, 0.7))
    img = img + (stripes * band)[None]
    return np.clip(img, 0.0, 1.0)


def synth_kind(j: np.ndarray, kind: str, rng: np.random.Generator) -> ImagePair:
    shape = j.shape[1:]
    if kind == "haze":
        return synth_haze(j, random_haze_params(shape, rng))
    if kind == "rain":
        return synth_rain(j, random_rain_params(rng))
    if kind == "snow":
        return synth_snow(j, random_snow_params(shape, rng))
    if kind == "rain+haze":
        haze = random_haze_params(shape, rng)
        return synth_rain_haze(j, random_rain_params(rng), haze)
    raise ConfigurationError(f"unknown degradation kind {kind!r}; expected one of {KINDS}")


def parse_mix(weights) -> dict[str, float]:
    """Accept ``{"haze": 1}`` or ``"haze=1,rain=2"``."""
    if isinstance(weights, str):
        out = {}
        for part in filter(None, (s.strip() for s in weights.split(","))):
            if "=" not in part:
                raise ConfigurationError(f"mix entry {part!r} must look like kind=weight")
            k, v = part.split("=", 1)
            try:
                out[k.strip()] = float(v)
            except ValueError as exc:
                raise ConfigurationError(f"mix weight {v!r} is not a number") from exc
        weights = out
    mix = {k: float(v) for k, v in dict(weights).items()}
    if not mix:
        raise ConfigurationError("mix must name at least one degradation kind")
    bad = [k for k in mix if k not in KINDS]
    if bad:
        raise ConfigurationError(f"unknown degradation kinds {bad}; expected some of {KINDS}")
    if any(v < 0 for v in mix.values()) or sum(mix.values()) <= 0:
        raise ConfigurationError("mix weights must be non-negative with a positive sum")
    return mix


def make_dataset(count: int, size: int, mix, seed: int) -> list[ImagePair]:
    """Deterministic list of ``count`` (clean, degraded) pairs at ``size`` x ``size``."""
    if not is_power_of_two(size):
        raise ConfigurationError(f"image size {size} must be a power of two (radix-2 FFT loss)")
    mix = parse_mix(mix)
    kinds = list(mix)
    probs = np.array([mix[k] for k in kinds])
    probs = probs / probs.sum()
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        sample_seed = int(rng.integers(2 ** 31))
        srng = np.random.default_rng(sample_seed)
        pair = synth_kind(procedural_scene(size, srng), kind, srng)
        pair.seed = sample_seed
        pairs.append(pair)
    return pairs
