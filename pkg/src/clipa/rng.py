"""Counter-based 64-bit random numbers (splitmix64).

Every random decision in the library (token masks, synthetic images) is a
pure function of ``(seed, purpose tag, index, counter)`` so results do not
depend on execution order and can be reproduced in any language.

Definition::

    mix64(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   (mod 2**64)
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB   (mod 2**64)
        return z ^ (z >> 31)

    stream_key(seed, w1, ..., wn):
        k = mix64(seed + GOLDEN)
        for w in words: k = mix64((k ^ w) + GOLDEN)

    u64(key, i)      = mix64(key + (i + 1) * GOLDEN)       # i-th splitmix64 output
    below(key, i, n) = (u64(key, i) * n) >> 64              # integer in [0, n)
    uniform(key, i)  = (u64(key, i) >> 11) * 2**-53         # float in [0, 1)

with ``GOLDEN = 0x9E3779B97F4A7C15`` and all arithmetic modulo 2**64.

Test vectors (seed 0): ``stream_key(0) == 0xE220A8397B1DCDAF`` and
``u64(stream_key(0), 0) == 0xA706DD2F4D197E6F``.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

# purpose tags keep independent streams apart for the same seed
TAG_RANDOM_MASK = 1
TAG_BLOCK_MASK = 2
TAG_SYNTH_DATA = 3


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, *words: int) -> int:
    k = mix64((seed & MASK64) + GOLDEN)
    for w in words:
        k = mix64(((k ^ (w & MASK64)) + GOLDEN) & MASK64)
    return k


def u64(key: int, i: int) -> int:
    return mix64((key + (i + 1) * GOLDEN) & MASK64)


def below(key: int, i: int, n: int) -> int:
    if n < 1:
        raise ValueError(f"below() needs n >= 1, got {n}")
    return (u64(key, i) * n) >> 64


def uniform(key: int, i: int) -> float:
    return (u64(key, i) >> 11) * (1.0 / (1 << 53))


def u64_array(key: int, start: int, count: int) -> np.ndarray:
    """Vectorized ``[u64(key, start), ..., u64(key, start + count - 1)]``."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + idx * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def uniform_array(key: int, start: int, count: int) -> np.ndarray:
    """Float64 uniforms in [0, 1), elementwise identical to :func:`uniform`."""
    return (u64_array(key, start, count) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
