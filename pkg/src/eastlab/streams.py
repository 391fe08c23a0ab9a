"""Counter-based random number streams for the graphical construction.

Every random quantity in a simulation is a pure function of
``(master_seed, site, purpose, draw_index)``.  This is what makes replicas
embarrassingly parallel, window growth non-perturbing, and replay exact:
a site's Poisson clock and coin sequence do not depend on when the site was
activated or on how large the window is.

The generator is a splitmix64-style counter stream: a 64-bit key is derived
from (seed, site, purpose) by two scrambling rounds, and the k-th draw is the
scrambled value of ``key + k * GOLDEN``.  All hot-path helpers are numba
kernels so the Python engine and the compiled batch drivers consume
bit-identical values.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, uint64, int64, float64

U64 = np.uint64

_GOLD = U64(0x9E3779B97F4A7C15)
_MIX1 = U64(0xBF58476D1CE4E5B9)
_MIX2 = U64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53

# purpose codes; distinct purposes give computationally independent substreams
CLOCK = 1
COIN = 2
INIT = 3
AUX = 4


@njit(uint64(uint64), cache=True, inline="always")
def _scramble(z):
    z = (z ^ (z >> U64(30))) * _MIX1
    z = (z ^ (z >> U64(27))) * _MIX2
    return z ^ (z >> U64(31))


@njit(uint64(uint64, uint64), cache=True, inline="always")
def _mix2(a, b):
    return _scramble((a + _GOLD) ^ _scramble(b + _GOLD))


@njit(uint64(uint64, int64, int64), cache=True, inline="always")
def stream_key(seed, site, purpose):
    """64-bit substream key for (seed, site, purpose); site may be negative."""
    return _mix2(_mix2(seed, U64(site)), U64(purpose))


@njit(float64(uint64, int64), cache=True, inline="always")
def u01(key, k):
    """k-th uniform draw of a substream, in [0, 1)."""
    z = _scramble(key + U64(k) * _GOLD)
    return (z >> U64(11)) * _INV53


@njit(float64(uint64, int64), cache=True, inline="always")
def exp_gap(key, k):
    """k-th Exponential(1) inter-ring gap of a clock substream."""
    return -math.log(1.0 - u01(key, k))


@njit(int64(uint64, int64, float64), cache=True, inline="always")
def coin_bit(key, k, p):
    """k-th Bernoulli(p) coin of a coin substream (1 = occupied)."""
    return 1 if u01(key, k) < p else 0


@njit(uint64(uint64, int64), cache=True, inline="always")
def replica_seed(master_seed, replica):
    """Derived seed for one replica of a replica farm."""
    return _mix2(master_seed, U64(replica))


def as_seed(value: int) -> np.uint64:
    """Coerce a Python integer to the uint64 master-seed domain."""
    return U64(int(value) & 0xFFFFFFFFFFFFFFFF)


class EventStream:
    """Per-site substream access for one trajectory.

    Thin stateless facade over the counter functions; safe to share
    read-only between coupled trajectories (that sharing *is* the standard
    coupling).
    """

    def __init__(self, master_seed: int, p: float):
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"p must lie in [0, 1], got {p}")
        self.master_seed = as_seed(master_seed)
        self.p = float(p)

    def clock_key(self, site: int) -> np.uint64:
        return stream_key(self.master_seed, site, CLOCK)

    def ring_times(self, site: int, t_end: float, t_start: float = 0.0) -> np.ndarray:
        """All ring times of `site` in (t_start, t_end], with their indices.

        Returns a (times, indices) pair; indices are the per-site ring
        sequence numbers used for coin attachment.
        """
        key = self.clock_key(site)
        times = []
        idx = []
        t = 0.0
        k = 0
        while True:
            t += exp_gap(key, k)
            if t > t_end:
                break
            if t > t_start:
                times.append(t)
                idx.append(k)
            k += 1
        return np.asarray(times, dtype=np.float64), np.asarray(idx, dtype=np.int64)

    def first_ring_after(self, site: int, t: float) -> tuple[float, int]:
        """First ring time strictly after `t` and its ring index."""
        key = self.clock_key(site)
        tt = 0.0
        k = 0
        while tt <= t:
            tt += exp_gap(key, k)
            k += 1
        return tt, k - 1

    def coin(self, site: int, k: int) -> int:
        return coin_bit(stream_key(self.master_seed, site, COIN), k, self.p)

    def init_bit(self, site: int) -> int:
        """Frozen Bernoulli(p) time-zero value of `site` (lazy tails, mu-tilde)."""
        return coin_bit(stream_key(self.master_seed, site, INIT), 0, self.p)

    def aux_uniform(self, tag: int, k: int) -> float:
        """Auxiliary uniform for non-kernel randomness keyed off this seed."""
        return u01(stream_key(self.master_seed, tag, AUX), k)
