"""Counter-based random streams.

Every stream is a pair ``(key, counter)`` stored in a two-element uint64
array. Draws hash ``key + counter * golden`` through the splitmix64
finalizer, so a stream is fully determined by the tuple it was keyed with
and never depends on scheduling or worker count.
"""

from __future__ import annotations

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0

# Salts that separate logical streams sharing the same (frame, pixel) key.
SALT_PATH = 0
SALT_RECORD = 1
SALT_INIT = 2
SALT_PERM = 3


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = np.uint64(z)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def make_key(seed, frame, pixel, sample, salt):
    k = mix64(np.uint64(seed) + _GOLDEN)
    k = mix64(k ^ np.uint64(frame))
    k = mix64(k ^ np.uint64(pixel))
    k = mix64(k ^ np.uint64(sample))
    k = mix64(k ^ np.uint64(salt))
    return k


@nb.njit(cache=True)
def seed_state(state, seed, frame, pixel, sample, salt):
    state[0] = make_key(seed, frame, pixel, sample, salt)
    state[1] = np.uint64(0)


@nb.njit(cache=True, inline="always")
def next_u64(state):
    state[1] += np.uint64(1)
    return mix64(state[0] + state[1] * _GOLDEN)


@nb.njit(cache=True, inline="always")
def next_float(state):
    """Uniform double in [0, 1)."""
    return float(next_u64(state) >> np.uint64(11)) * _INV53


class RandomStream:
    """Python handle on a counter-based stream.

    The underlying ``state`` array is what the compiled kernels consume, so a
    stream can be handed to either the Python wrappers or the kernels.
    """

    def __init__(self, seed: int = 0, frame: int = 0, pixel: int = 0, sample: int = 0, salt: int = SALT_PATH):
        self.state = np.zeros(2, dtype=np.uint64)
        seed_state(self.state, seed, frame, pixel, sample, salt)

    def uniform(self) -> float:
        return next_float(self.state)

    def uniforms(self, n: int) -> np.ndarray:
        return _fill(self.state, n)


@nb.njit(cache=True)
def _fill(state, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = next_float(state)
    return out
