"""Reproducible random streams.

Every chain owns one :class:`RngStream`.  A stream is identified by a
``(seed, stream_id)`` pair of unsigned 64-bit integers and fans out into
three independent lanes (coin flips, channel draws, arrivals), so that
drawing values in blocks or one slot at a time consumes exactly the same
numbers from each lane.
"""
from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1

COIN_LANE = 0
CHANNEL_LANE = 1
ARRIVAL_LANE = 2


def _check_u64(value: int, name: str) -> int:
    value = int(value)
    if not 0 <= value <= _U64:
        raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value}")
    return value


class RngStream:
    """Independent PCG64 generators keyed by ``(seed, stream_id)``.

    Identical pairs reproduce identical draws.  Distinct pairs get
    distinct ``SeedSequence`` spawn keys and are statistically independent.
    """

    __slots__ = ("seed", "stream_id", "coin", "channel", "arrivals")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = _check_u64(seed, "seed")
        self.stream_id = _check_u64(stream_id, "stream_id")
        self.coin = self._lane(COIN_LANE)
        self.channel = self._lane(CHANNEL_LANE)
        self.arrivals = self._lane(ARRIVAL_LANE)

    def _lane(self, lane: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, lane))
        return np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def cell_stream_id(cell: int, replication: int) -> int:
    """Stream id for replication ``replication`` of sweep cell ``cell``.

    Depends only on the indices, never on execution order.
    """
    if cell < 0 or replication < 0 or cell >= 1 << 32 or replication >= 1 << 32:
        raise ValueError("cell and replication indices must fit in 32 bits")
    return (cell << 32) | replication
