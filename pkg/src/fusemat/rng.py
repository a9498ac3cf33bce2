"""Counter-based random fill, reproducible across platforms and languages.

The generator is the splitmix64 finalizer in counter mode.  For a 64-bit seed
``s``, element ``k`` (0-based, in column-major storage order) draws the 64-bit
word::

    x_k = mix64((s + (k + 1) * 0x9E3779B97F4A7C15) mod 2^64)

    mix64(z):
        z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9   (mod 2^64)
        z ^= z >> 27;  z *= 0x94D049BB133111EB   (mod 2^64)
        z ^= z >> 31
        return z

Mapping to values:

* f32 uniform [0,1):  (x_k >> 40) * 2^-24   (top 24 bits)
* f64 uniform [0,1):  (x_k >> 11) * 2^-53   (top 53 bits)
* u32/i32 uniform [0,m): (x_k >> 32) mod m  (top 32 bits; modulo bias is
  negligible for the small ranges used here and the rule is what's specified)

Any implementation following these formulas reproduces identical streams
bit for bit.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over a uint64 array (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = z.copy()
        z ^= z >> np.uint64(30)
        z *= _M1
        z ^= z >> np.uint64(27)
        z *= _M2
        z ^= z >> np.uint64(31)
    return z


def raw_words(seed: int, n: int) -> np.ndarray:
    """The first n 64-bit words of the stream for `seed`."""
    with np.errstate(over="ignore"):
        counters = np.arange(1, n + 1, dtype=np.uint64) * GOLDEN + np.uint64(seed)
    return mix64(counters)


def uniform_fill(seed: int, n: int, dtype: np.dtype) -> np.ndarray:
    """n uniform values in storage order: [0,1) floats, raw 32-bit ints."""
    words = raw_words(seed, n)
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return ((words >> np.uint64(40)).astype(np.float64) * 2.0**-24).astype(np.float32)
    if dtype == np.float64:
        return (words >> np.uint64(11)).astype(np.float64) * 2.0**-53
    if dtype in (np.dtype(np.uint32), np.dtype(np.int32)):
        return (words >> np.uint64(32)).astype(dtype)
    raise TypeError(f"unsupported dtype {dtype}")


def uniform_int_fill(seed: int, n: int, dtype: np.dtype, high: int) -> np.ndarray:
    """n integers uniform in [0, high) from the top 32 bits of each word."""
    if high <= 0:
        raise ValueError("high must be positive")
    words = raw_words(seed, n)
    return ((words >> np.uint64(32)) % np.uint64(high)).astype(dtype)
