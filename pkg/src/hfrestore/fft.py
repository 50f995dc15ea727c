"""Iterative radix-2 Cooley-Tukey FFT over the last axis."""
import numpy as np

from .errors import ConfigurationError


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unnormalized forward DFT along ``axis`` (length must be a power of two)."""
    a = np.moveaxis(np.asarray(a, dtype=np.complex128), axis, -1)
    n = a.shape[-1]
    if not is_power_of_two(n):
        raise ConfigurationError(f"FFT length {n} is not a power of two")
    lead = a.shape[:-1]
    out = a[..., _bit_reverse(n)]
    m = 2
    while m <= n:
        half = m // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = out.reshape(*lead, n // m, m)
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        m *= 2
    return np.moveaxis(out, -1, axis)


def fft2(a: np.ndarray) -> np.ndarray:
    """2-D DFT over the last two axes."""
    return fft(fft(a, axis=-1), axis=-2)

