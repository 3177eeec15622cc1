"""Dense linear algebra helpers, stable softmax and a counter-based RNG.

Tensors are plain ``numpy.float64`` arrays of rank 1 or 2.  The random number
generator is SplitMix64 written in counter form::

    out[k] = mix64(seed + (k + 1) * 0x9E3779B97F4A7C15  mod 2**64)
    mix64(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
              z = (z ^ (z >> 27)) * 0x94D049BB133111EB
              return z ^ (z >> 31)

which is exactly the sequential SplitMix64 stream started at ``seed``, so any
block of the stream can be produced with vectorised ``uint64`` arithmetic.
Uniform doubles take the top 53 bits (``(u >> 11) * 2**-53``); normals use
Box-Muller on consecutive uniform pairs, cosine branch first, then sine.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, ShapeError

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

_U64 = np.uint64


def mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _U64(MIX1)
    z = (z ^ (z >> _U64(27))) * _U64(MIX2)
    return z ^ (z >> _U64(31))


def mix64_int(z: int) -> int:
    """Scalar SplitMix64 finaliser on Python ints."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class Rng:
    """Counter-based SplitMix64 stream.

    ``spawn(key)`` derives an independent child stream, so that e.g. source
    batch sampling and augmentation noise never perturb each other.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0) -> None:
        self.seed = int(seed) & MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def spawn(self, key: int) -> Rng:
        return Rng(mix64_int(self.seed ^ mix64_int((int(key) + 0xD1B54A32D192ED03) & MASK64)))

    def u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise DomainError("negative sample count")
        with np.errstate(over="ignore"):
            k = np.arange(self.counter + 1, self.counter + n + 1, dtype=_U64)
            z = _U64(self.seed) + k * _U64(GAMMA)
            out = mix64(z)
        self.counter += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.u64(n) >> _U64(11)).astype(np.float64) * (2.0**-53)

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.empty((m, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers in [0, high) by 32-bit multiply-shift."""
        if not 0 < high < 2**32:
            raise DomainError(f"high must be in (0, 2**32), got {high}")
        hi = self.u64(n) >> _U64(32)
        return ((hi * _U64(high)) >> _U64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")


def as_tensor(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ShapeError(f"data length {a.size} != {rows}x{cols}")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"expected a rank-2 tensor, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise DomainError("softmax input contains non-finite values")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"cosine of mismatched vectors {u.shape} / {v.shape}")
    nu = float(np.sqrt(u @ u))
    nv = float(np.sqrt(v @ v))
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine of a zero-norm vector")
    return float(np.clip((u @ v) / (nu * nv), -1.0, 1.0))


def gaussian(rng: Rng, n: int, d: int, mean, std: float) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    if mean.size != d:
        raise ShapeError(f"mean has length {mean.size}, expected {d}")
    if std < 0:
        raise DomainError("std must be non-negative")
    noise = rng.normal(n * d).reshape(n, d)
    return mean[None, :] + std * noise
