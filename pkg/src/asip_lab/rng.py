"""Counter-based random streams.

Every random number used by the package is a pure function of
``(stream key, counter)``::

    u(key, t) = mix64(key + (t + 1) * GOLDEN) >> 11  scaled to [0, 1)

which is exactly the SplitMix64 generator seeded with ``key`` and read at
position ``t``.  Replica ``r`` of an experiment with master seed ``M`` uses
the key ``seed_stream(M, r).stream_id``.  Nothing depends on execution
order, so a replica draws the same numbers whether it runs alone, in a
vectorised batch, or on another worker thread.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    """SplitMix64 output function (a bijection of 64-bit integers)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    replica_id: int
    stream_id: int


def seed_stream(master: int, replica_id: int) -> SeedSpec:
    """Derive the stream of one replica.

    ``stream_id = mix64(mix64(master) + (replica_id + 1) * GOLDEN)``.  For a
    fixed master the map ``replica_id -> stream_id`` is injective on all
    64-bit ids: multiplication by the odd constant, translation and
    ``mix64`` are all bijections modulo 2**64.
    """
    if replica_id < 0:
        raise ValueError("replica_id must be >= 0")
    base = mix64(master & MASK64)
    sid = mix64((base + (replica_id + 1) * GOLDEN) & MASK64)
    return SeedSpec(master & MASK64, replica_id, sid)


def stream_keys(master: int, count: int, start: int = 0) -> np.ndarray:
    """Vectorised ``seed_stream(master, r).stream_id`` for r in [start, start+count)."""
    base = np.uint64(mix64(master & MASK64))
    ids = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64_array(base + ids * np.uint64(GOLDEN))


def derive_key(key, tag: int):
    """Independent sub-stream of ``key`` labelled by a small integer tag."""
    t = mix64((tag * _M2 + 0x632BE59BD9B4E019) & MASK64)
    if isinstance(key, (int, np.integer)) and np.ndim(key) == 0:
        return mix64((int(key) ^ t) & MASK64)
    return mix64_array(np.asarray(key, dtype=np.uint64) ^ np.uint64(t))


def tag_master(master: int, name: str) -> int:
    """Master seed for a named sub-computation of an experiment."""
    h = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")
    return mix64((master ^ h) & MASK64)


def uniforms(keys, counters) -> np.ndarray:
    """Uniform doubles in [0, 1) at positions ``counters`` of streams ``keys``.

    ``keys`` and ``counters`` broadcast against each other.
    """
    k = np.asarray(keys, dtype=np.uint64)
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = mix64_array(k + (c + np.uint64(1)) * np.uint64(GOLDEN))
    return (x >> np.uint64(11)).astype(np.float64) * _INV53


def key_of(seed) -> int:
    """Accept a SeedSpec or a raw 64-bit key."""
    if isinstance(seed, SeedSpec):
        return seed.stream_id
    return int(seed) & MASK64


class Stream:
    """A single stream viewed as an indexable sequence of uniforms."""

    def __init__(self, seed):
        self.key = key_of(seed)

    def uniform(self, counter: int) -> float:
        return float(uniforms(self.key, counter))

    def block(self, start: int, count: int) -> np.ndarray:
        return uniforms(self.key, np.arange(start, start + count, dtype=np.uint64))

    def sub(self, tag: int) -> "Stream":
        return Stream(derive_key(self.key, tag))
