"""Counter-based random streams.

Every random draw in the evaluator is a pure function of a small integer
key tuple, so results never depend on evaluation order, worker count, or
how a grid is partitioned. The generator is a splitmix64 hash of the mixed
key, mapped to uniforms in (0, 1) and to normals through the inverse CDF.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# role tags keep independent streams from colliding
STREAM_INPUT_JITTER = 0x11
STREAM_NODE_JITTER = 0x22
STREAM_RHO_TRAIN = 0x33
STREAM_ORACLE = 0x44
STREAM_STRATA = 0x55


def _mix(z: np.ndarray) -> np.ndarray:
    # uint64 wraparound is the point; silence numpy's overflow chatter
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def hash_key(*parts: int) -> np.uint64:
    """Collapse integer key parts into one 64-bit state, order-sensitive."""
    z = np.uint64(0)
    with np.errstate(over="ignore"):
        for p in parts:
            z = _mix((z + np.uint64(p & 0xFFFFFFFFFFFFFFFF)) * _GAMMA
                     + _GAMMA)
    return z


def uniform(key: np.uint64, counters: np.ndarray) -> np.ndarray:
    """Uniforms in (0, 1), one per counter value. counters: uint64 array."""
    with np.errstate(over="ignore"):
        z = _mix((key + (counters + np.uint64(1)) * _GAMMA))
    u = (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    # keep strictly inside (0,1) so ndtri stays finite
    return np.clip(u, 1e-17, 1.0 - 1e-16)


def normal(key: np.uint64, counters: np.ndarray) -> np.ndarray:
    return ndtri(uniform(key, counters))


def normal_grid(seed: int, stream: int, ident: int, pixel_ids: np.ndarray,
                sample_idx: int) -> np.ndarray:
    """Standard normals keyed by (seed, stream, ident, pixel, sample).

    `ident` is a node id or other small integer naming the variable being
    jittered; pixel_ids is any integer array (the draw depends only on the
    id value, not its position in the array).
    """
    key = hash_key(seed, stream, ident, sample_idx)
    return normal(key, pixel_ids.astype(np.uint64))


def permuted_index(key: np.uint64, n: int, position: int,
                   pixel_ids: np.ndarray) -> np.ndarray:
    """Keyed pseudorandom permutation of range(n) evaluated at `position`,
    one independent permutation per pixel id.

    Feistel rounds over the smallest even-bit domain covering n, cycle-walked
    back into [0, n), so each permutation costs O(1) memory and any single
    position can be evaluated without materialising the rest.
    """
    if not 0 <= position < n:
        raise ValueError(f"position {position} outside permutation "
                         f"domain [0, {n})")
    ids = pixel_ids.astype(np.uint64)
    if n == 1:
        return np.zeros(ids.shape, dtype=np.uint64)
    bits = (n - 1).bit_length()
    bits += bits & 1  # equal-width Feistel halves
    half = np.uint64(bits // 2)
    mask = np.uint64((1 << (bits // 2)) - 1)
    with np.errstate(over="ignore"):
        px_key = _mix(key + (ids + np.uint64(1)) * _GAMMA)
        x = np.full(ids.shape, position, dtype=np.uint64)
        todo = np.ones(ids.shape, dtype=bool)
        while np.any(todo):
            left = x[todo] >> half
            right = x[todo] & mask
            k = px_key[todo]
            for rnd in range(4):
                f = _mix(k + right * _M1 + np.uint64(rnd) * _M2) & mask
                left, right = right, left ^ f
            x[todo] = (left << half) | right
            todo[todo] = x[todo] >= np.uint64(n)
    return x
