"""Iterative radix-2 FFT along arbitrary axes (power-of-two lengths only)."""
from __future__ import annotations

import numpy as np

__all__ = ["is_power_of_two", "fft", "ifft", "fftn", "ifftn", "fftfreq"]


def is_power_of_two(n: int) -> bool:
    n = int(n)
    return n > 0 and n & (n - 1) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _transform(x: np.ndarray, axis: int, inverse: bool) -> np.ndarray:
    x = np.asarray(x)
    n = x.shape[axis]
    if not is_power_of_two(n):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, axis {axis} has {n}")
    a = np.moveaxis(x.astype(np.complex128), axis, -1)[..., _bit_reverse(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        a = a.reshape(a.shape[:-1] + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        a = a.reshape(a.shape[:-2] + (n,))
        size *= 2
    if inverse:
        a = a / n
    return np.moveaxis(a, -1, axis)


def fft(x, axis: int = -1) -> np.ndarray:
    return _transform(x, axis, inverse=False)


def ifft(x, axis: int = -1) -> np.ndarray:
    return _transform(x, axis, inverse=True)


def fftn(x, axes=None) -> np.ndarray:
    x = np.asarray(x)
    for ax in range(x.ndim) if axes is None else axes:
        x = fft(x, ax)
    return x


def ifftn(x, axes=None) -> np.ndarray:
    x = np.asarray(x)
    for ax in range(x.ndim) if axes is None else axes:
        x = ifft(x, ax)
    return x


def fftfreq(n: int, d: float = 1.0) -> np.ndarray:
    """Sample frequencies in the same order as :func:`fft` output (cycles per unit)."""
    k = np.arange(n)
    k[k >= (n + 1) // 2] -= n
    return k / (n * d)
