"""
Orthonormal DCT-II / DCT-III along one axis, power spectra and low-pass filtering.

    C[m] = a[m] * sum_i x[i] * cos(pi * m * (i + 1/2) / N)

    a[0] = sqrt(1/N),  a[m>0] = sqrt(2/N)

The transform matrix is orthogonal, so ``idct`` is its transpose and the
energy of a signal equals the energy of its coefficients.

Short axes (N <= 512) go through a cached dense matrix; longer ones use an
N-point complex FFT of the even/odd reordered signal (Makhoul's method).
All arithmetic is float64; float32 inputs come back as float32.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

__all__ = [
    "MATRIX_MAX_N",
    "NonFiniteError",
    "check_finite",
    "cutoff_index",
    "dct",
    "dct_matrix",
    "idct",
    "lowpass",
    "power_spectrum",
]

MATRIX_MAX_N = 512


class NonFiniteError(ValueError):
    """Raised when an input tensor carries NaN or Inf."""

    def __init__(self, message: str, index: tuple[int, ...]):
        super().__init__(message)
        self.index = index


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(x))[0])
        raise NonFiniteError(f"{what} has non-finite value {x[bad]!r} at index {bad}", bad)


@lru_cache(maxsize=32)
def _scale(n: int) -> np.ndarray:
    a = np.full(n, math.sqrt(2.0 / n))
    a[0] = math.sqrt(1.0 / n)
    a.setflags(write=False)
    return a


@lru_cache(maxsize=16)
def dct_matrix(n: int) -> np.ndarray:
    """Return the N x N orthonormal DCT-II matrix ``G`` (``C = G @ x``)."""
    if n < 1:
        raise ValueError(f"transform length must be >= 1, got {n}")
    m = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    g = _scale(n)[:, None] * np.cos(np.pi * m * (2 * i + 1) / (2 * n))
    g.setflags(write=False)
    return g


@lru_cache(maxsize=16)
def _twiddle(n: int) -> np.ndarray:
    w = np.exp(-1j * np.pi * np.arange(n) / (2 * n))
    w.setflags(write=False)
    return w


def _out_dtype(x: np.ndarray):
    return np.float32 if x.dtype == np.float32 else np.float64


def _prepare(x, what: str) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    if x.ndim == 0:
        raise ValueError(f"{what} must have at least one dimension")
    if not np.issubdtype(x.dtype, np.number) or np.iscomplexobj(x):
        raise TypeError(f"{what} must be real-valued, got dtype {x.dtype}")
    check_finite(x, what)
    return x, x.astype(np.float64, copy=False)


def _fast_dct(x: np.ndarray) -> np.ndarray:
    # x: contiguous float64 with the transform axis last.
    # With Z[k] = W[k] * FFT(v)[k]: C[k] ~ Re Z[k] and C[N-k] ~ -Im Z[k].
    n = x.shape[-1]
    h = n // 2 + 1
    v = np.concatenate([x[..., ::2], x[..., 1::2][..., ::-1]], axis=-1)
    z = _twiddle(n)[:h] * np.fft.rfft(v, axis=-1)
    out = np.empty(x.shape)
    out[..., :h] = z.real
    out[..., h:] = -z.imag[..., 1 : n - h + 1][..., ::-1]
    out *= _scale(n)
    return out


def _fast_idct(c: np.ndarray) -> np.ndarray:
    n = c.shape[-1]
    h = n // 2 + 1
    y = c / _scale(n)
    # y[N - k] for k < h, with y[N] := 0
    rev = np.zeros(y.shape[:-1] + (h,))
    rev[..., 1:] = y[..., :0:-1][..., : h - 1]
    v = np.fft.irfft(np.conj(_twiddle(n)[:h]) * (y[..., :h] - 1j * rev), n=n, axis=-1)
    x = np.empty_like(v)
    half = (n + 1) // 2
    x[..., ::2] = v[..., :half]
    x[..., 1::2] = v[..., half:][..., ::-1]
    return x


def _apply(x: np.ndarray, axis: int, inverse: bool) -> np.ndarray:
    n = x.shape[axis]
    if n <= MATRIX_MAX_N:
        moved = np.moveaxis(x, axis, 0)
        g = dct_matrix(n)
        flat = moved.reshape(n, -1)
        out = (g.T @ flat) if inverse else (g @ flat)
        return np.moveaxis(out.reshape(moved.shape), 0, axis)
    moved = np.ascontiguousarray(np.moveaxis(x, axis, -1))
    out = _fast_idct(moved) if inverse else _fast_dct(moved)
    return np.moveaxis(out, -1, axis)


def dct(x, axis: int = -1) -> np.ndarray:
    """Orthonormal DCT-II of ``x`` along ``axis``.

    Raises NonFiniteError naming the first offending index.
    """
    orig, x64 = _prepare(x, "signal")
    out = _apply(x64, axis, inverse=False)
    return out.astype(_out_dtype(orig), copy=False)


def idct(coeffs, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`dct` (orthonormal DCT-III) along ``axis``."""
    orig, c64 = _prepare(coeffs, "coefficients")
    out = _apply(c64, axis, inverse=True)
    return out.astype(_out_dtype(orig), copy=False)


def cutoff_index(n: int, gamma: float) -> int:
    """Number of low-frequency coefficients kept for length ``n``: max(1, ceil(gamma*n)).

    The product is rounded to 9 decimals before the ceiling so that e.g.
    0.7 * 10 = 7.000000000000001 keeps 7 coefficients, not 8.
    """
    if not 0.0 <= gamma <= 1.0 or math.isnan(gamma):
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if n < 1:
        raise ValueError(f"length must be >= 1, got {n}")
    return max(1, min(n, math.ceil(round(gamma * n, 9))))


def lowpass(coeffs, gamma: float, axis: int = -1) -> np.ndarray:
    """Zero every coefficient at index >= cutoff_index(N, gamma) along ``axis``."""
    c = np.asarray(coeffs)
    n = c.shape[axis]
    keep = cutoff_index(n, gamma)
    out = np.array(c, copy=True)
    idx = [slice(None)] * out.ndim
    idx[axis] = slice(keep, None)
    out[tuple(idx)] = 0
    return out


def power_spectrum(coeffs) -> np.ndarray:
    c, c64 = _prepare(coeffs, "coefficients")
    return np.square(c64).astype(_out_dtype(c), copy=False)
