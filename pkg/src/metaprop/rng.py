"""Deterministic 64-bit PRNG with index-addressed substreams.

The generator is xoshiro256** seeded through splitmix64, so every stream
is fully specified by the run seed plus an integer index path such as
(replicate, study, trial).  Stream state is held in numpy uint64 arrays,
which lets many parallel streams advance in lockstep (one lane per
stream) without Python-level loops.
"""

from __future__ import annotations

import numpy as np

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer; input and output are uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (z + _GOLDEN).astype(_U64)
        z = ((z ^ (z >> _U64(30))) * _MIX1).astype(_U64)
        z = ((z ^ (z >> _U64(27))) * _MIX2).astype(_U64)
        return (z ^ (z >> _U64(31))).astype(_U64)


def stream_key(seed: int, *path: int) -> np.ndarray:
    """Derive a substream key from a seed and an index path.

    Accepts scalar indices or equal-length integer arrays (for building
    one key per lane in a single call).
    """
    key = _mix64(np.asarray(seed, dtype=np.int64).astype(_U64))
    for idx in path:
        with np.errstate(over="ignore"):
            idx_u = (np.asarray(idx, dtype=np.int64).astype(_U64) + _U64(1)) * _GOLDEN
        key = _mix64(key ^ _mix64(idx_u.astype(_U64)))
    return key


class Streams:
    """A bank of independent xoshiro256** streams advancing in lockstep.

    ``keys`` is the uint64 array of stream keys from :func:`stream_key`;
    each key expands into a distinct 256-bit state via splitmix64.
    """

    def __init__(self, keys: np.ndarray):
        keys = np.atleast_1d(np.asarray(keys, dtype=_U64))
        s = np.empty((4,) + keys.shape, dtype=_U64)
        state = keys
        for i in range(4):
            state = _mix64(state)
            s[i] = state
        # Guard the all-zero state (xoshiro requirement); astronomically
        # unlikely but cheap to rule out.
        dead = ~np.any(s != 0, axis=0)
        if np.any(dead):
            s[0][dead] = _GOLDEN
        self._s = s

    @property
    def n(self) -> int:
        return self._s.shape[1]

    def next_u64(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            s0, s1, s2, s3 = self._s
            tmp = (s1 * _U64(5)).astype(_U64)
            result = ((tmp << _U64(7)) | (tmp >> _U64(57))) * _U64(9)
            t = (s1 << _U64(17)).astype(_U64)
            s2 = s2 ^ s0
            s3 = s3 ^ s1
            s1 = s1 ^ s2
            s0 = s0 ^ s3
            s2 = s2 ^ t
            s3 = ((s3 << _U64(45)) | (s3 >> _U64(19))).astype(_U64)
            self._s = np.stack([s0, s1, s2, s3])
            return result.astype(_U64)

    def uniform(self) -> np.ndarray:
        """One double in [0, 1) per stream (53-bit resolution)."""
        return (self.next_u64() >> _U64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform_open(self) -> np.ndarray:
        """One double in (0, 1] per stream; safe as a log() argument."""
        return ((self.next_u64() >> _U64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)

    def normal(self) -> np.ndarray:
        """One standard normal per stream via the Box-Muller transform."""
        u1 = self.uniform_open()
        u2 = self.uniform()
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, low: int, high: int) -> np.ndarray:
        """One integer per stream, uniform over [low, high] inclusive.

        Uses the 53-bit uniform; span must be far below 2**53, which is
        always true for test-set sizes.
        """
        span = high - low + 1
        if span <= 0:
            raise ValueError("integers() requires low <= high")
        return low + np.minimum((self.uniform() * span).astype(np.int64), span - 1)


def binomial(key: np.ndarray, n: int, p: float, lanes: int = 1024) -> int:
    """Exact Binomial(n, p) draw for one stream key.

    Counts uniforms below ``p`` across ``lanes`` parallel substreams
    (key, 0..lanes-1), each contributing a near-equal share of the n
    draws, so large n stays vectorized.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n == 0:
        return 0
    lanes = min(lanes, n)
    sub = Streams(_lane_keys(key, lanes))
    counts = np.zeros(lanes, dtype=np.int64)
    base, extra = divmod(n, lanes)
    per_lane = np.full(lanes, base, dtype=np.int64)
    per_lane[:extra] += 1
    rounds = int(per_lane.max())
    for r in range(rounds):
        active = per_lane > r
        u = sub.uniform()
        counts[active] += (u[active] < p).astype(np.int64)
    return int(counts.sum())


def _lane_keys(key: np.ndarray, lanes: int) -> np.ndarray:
    key = np.asarray(key, dtype=_U64).reshape(())
    with np.errstate(over="ignore"):
        idx = (np.arange(lanes, dtype=np.int64).astype(_U64) + _U64(1)) * _GOLDEN
    return _mix64(key ^ _mix64(idx))
