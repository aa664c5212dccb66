"""Bounded replay store sitting between two adjacent modules.

Writes overwrite the oldest entry once the buffer is full. Reads pick the
least-reused entry, newest first among equals, and bump its reuse count.
Capacity is counted in batches.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Any

import numpy as np

log = logging.getLogger(__name__)

FLOAT_BITS = 32


class BufferStarved(LookupError):
    """Raised by :meth:`ReplayBuffer.sample` when there is nothing to read."""


@dataclass
class BufferEntry:
    payload: Any
    labels: np.ndarray
    seq: int
    reuse_count: int = 0

    @property
    def key(self) -> tuple[int, int]:
        """Sort key of the read rule: smaller is served first."""
        return (self.reuse_count, -self.seq)


@dataclass(frozen=True)
class BufferStats:
    size: int
    total_bits: int
    reuse_histogram: dict[int, int]

    @property
    def total_bytes(self) -> int:
        return math.ceil(self.total_bits / 8)


def payload_bits(payload) -> int:
    """Storage cost of one payload, without any shared codebook.

    Raw activations cost 32 bits per value; quantized payloads report their
    own packed index size.
    """
    if isinstance(payload, np.ndarray):
        return FLOAT_BITS * payload.size
    return int(payload.index_bits)


def capacity_from_samples(samples: int, batch_size: int) -> int:
    """Convert a capacity given in samples to whole batches (rounding up)."""
    if samples < 1 or batch_size < 1:
        raise ValueError("samples and batch_size must be positive")
    batches = -(-samples // batch_size)
    if batches * batch_size != samples:
        log.info("buffer of %d samples rounded up to %d batches of %d",
                 samples, batches, batch_size)
    return batches


class ReplayBuffer:
    """Capacity-``M`` store of ``(payload, labels)`` batches.

    Safe for one writer thread and one reader thread: every public method
    holds an internal lock.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be at least one batch")
        self.capacity = capacity
        self._entries: list[BufferEntry] = []
        self._next_seq = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def writes(self) -> int:
        return self._next_seq

    def entries(self) -> list[BufferEntry]:
        with self._lock:
            return list(self._entries)

    def push(self, payload, labels) -> BufferEntry:
        with self._lock:
            if len(self._entries) >= self.capacity:
                oldest = min(range(len(self._entries)), key=lambda i: self._entries[i].seq)
                del self._entries[oldest]
            entry = BufferEntry(payload, np.asarray(labels), self._next_seq)
            self._next_seq += 1
            self._entries.append(entry)
            return entry

    def try_sample(self) -> BufferEntry | None:
        """Like :meth:`sample` but returns ``None`` when empty."""
        with self._lock:
            if not self._entries:
                return None
            entry = min(self._entries, key=lambda e: e.key)
            entry.reuse_count += 1
            return entry

    def sample(self) -> BufferEntry:
        entry = self.try_sample()
        if entry is None:
            raise BufferStarved("replay buffer is empty")
        return entry

    def stats(self, codebook_bits: int = 0) -> BufferStats:
        """Occupancy and storage.

        ``codebook_bits`` is the size of the dictionary shared by all quantized
        entries; it is charged once when at least one entry is quantized.
        """
        with self._lock:
            bits = sum(payload_bits(e.payload) for e in self._entries)
            if any(not isinstance(e.payload, np.ndarray) for e in self._entries):
                bits += codebook_bits
            hist = Counter(e.reuse_count for e in self._entries)
            return BufferStats(len(self._entries), bits, dict(sorted(hist.items())))
