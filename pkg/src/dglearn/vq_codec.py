"""Online vector quantization of activations and its bit accounting.

A batch ``x`` of shape ``B x K x N x N`` is cut along channels into ``k``
groups. At every spatial site each group's sub-vector is replaced by the
index of its nearest atom in that group's dictionary of ``C`` atoms. The
encoder refreshes its dictionaries with exponential moving averages of
cluster statistics; the decoder holds a snapshot that is refreshed only when
a :class:`SyncPolicy` fires.

Bit counts are exact rationals (:class:`fractions.Fraction`).

Wire formats (little-endian) are described in ``docs/formats.md``.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

FLOAT_BITS = 32
QUANT_MAGIC = b"DGLQ"
CODEBOOK_MAGIC = b"DGLC"
QUANT_FORMAT_VERSION = 1

DEFAULT_DECAY = 0.99
DEFAULT_EPS = 1e-5
DEFAULT_DEAD_AFTER = 1024


class CodecError(ValueError):
    pass


def index_width(atoms: int) -> int:
    """Bits needed for one index into ``atoms`` entries: ``ceil(log2 C)``."""
    if atoms < 1:
        raise CodecError("a codebook needs at least one atom")
    return (atoms - 1).bit_length()


def group_dims(channels: int, groups: int) -> tuple[int, ...]:
    """Channel count of every group; the last group takes the remainder."""
    if groups < 1 or channels < groups:
        raise CodecError(f"cannot split {channels} channels into {groups} groups")
    d = channels // groups
    return (d,) * (groups - 1) + (channels - d * (groups - 1),)


def _sub_vectors(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    """``(B*N*N, d)`` view of channels ``start:stop`` at every site."""
    return x[:, start:stop].transpose(0, 2, 3, 1).reshape(-1, stop - start)


def nearest_atoms(v: np.ndarray, atoms: np.ndarray) -> np.ndarray:
    """Index of the closest atom (squared distance) for each row of ``v``.

    Ties go to the lowest index. Distances are first computed through the
    expanded form; rows whose best two candidates are within rounding
    distance of each other are re-resolved with the direct formula.
    """
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(atoms, dtype=np.float64)
    n, c = len(v), len(a)
    if c == 1 or n == 0:
        return np.zeros(n, dtype=np.int64)
    a_sq = np.einsum("cd,cd->c", a, a)
    dist = v @ (-2.0 * a.T)
    dist += a_sq
    idx = dist.argmin(axis=1)
    rows = np.arange(n)
    best = dist[rows, idx]
    dist[rows, idx] = np.inf
    runner_up = dist.min(axis=1)
    tol = 1e-9 * (np.einsum("nd,nd->n", v, v) + a_sq.max() + 1.0)
    risky = np.flatnonzero(runner_up - best <= tol)
    for lo in range(0, risky.size, 512):
        rows = risky[lo:lo + 512]
        idx[rows] = ((v[rows, None, :] - a[None]) ** 2).sum(axis=2).argmin(axis=1)
    return idx


@dataclass
class QuantizedBatch:
    """Atom indices of a batch, shape ``B x k x N x N``."""

    indices: np.ndarray
    atoms: int
    dims: tuple[int, ...]
    codebook_version: int = 0
    labels: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """Shape of the decoded tensor."""
        b, _, n, m = self.indices.shape
        return (b, sum(self.dims), n, m)

    @property
    def bits_per_index(self) -> int:
        return index_width(self.atoms)

    @property
    def index_bits(self) -> int:
        return int(self.indices.size) * self.bits_per_index

    def to_bytes(self) -> bytes:
        b, k, n, n2 = self.indices.shape
        if n != n2:
            raise CodecError("wire format requires square spatial extents")
        labels = np.zeros(b, dtype="<i4") if self.labels is None else np.asarray(self.labels)
        if labels.shape != (b,):
            raise CodecError(f"expected {b} labels, got shape {labels.shape}")
        head = struct.pack("<4sHIHHIQ", QUANT_MAGIC, QUANT_FORMAT_VERSION, b, k, n, self.atoms,
                           self.codebook_version)
        head += struct.pack(f"<{k}H", *self.dims)
        return head + pack_indices(self.indices, self.bits_per_index) + labels.astype("<i4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "QuantizedBatch":
        fixed = struct.calcsize("<4sHIHHIQ")
        if len(raw) < fixed:
            raise CodecError(f"quantized batch header truncated at byte offset {len(raw)}")
        magic, version, b, k, n, c, cb_version = struct.unpack_from("<4sHIHHIQ", raw)
        if magic != QUANT_MAGIC:
            raise CodecError(f"bad magic {magic!r} at byte offset 0")
        if version != QUANT_FORMAT_VERSION:
            raise CodecError(f"unsupported quantized format version {version}")
        off = fixed + 2 * k
        if len(raw) < off:
            raise CodecError(f"group table truncated at byte offset {len(raw)}")
        dims = struct.unpack_from(f"<{k}H", raw, fixed)
        bits = index_width(c)
        body = b * k * n * _row_bytes(n, bits)
        if len(raw) != off + body + 4 * b:
            raise CodecError(f"expected {off + body + 4 * b} bytes, found {len(raw)}")
        indices = unpack_indices(raw[off:off + body], (b, k, n, n), bits)
        labels = np.frombuffer(raw, dtype="<i4", count=b, offset=off + body).astype(np.int64)
        return cls(indices, c, tuple(dims), cb_version, labels)


def _row_bytes(n: int, bits: int) -> int:
    return (n * bits + 7) // 8


def pack_indices(indices: np.ndarray, bits: int) -> bytes:
    """Pack the last axis of ``indices`` at ``bits`` bits each, LSB first,
    padding every row to a whole byte."""
    if bits == 0:
        return b""
    rows = indices.reshape(-1, indices.shape[-1]).astype(np.uint64)
    planes = ((rows[:, :, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8)
    flat = planes.reshape(len(rows), -1)
    pad = _row_bytes(indices.shape[-1], bits) * 8 - flat.shape[1]
    if pad:
        flat = np.concatenate([flat, np.zeros((len(rows), pad), np.uint8)], axis=1)
    return np.packbits(flat, axis=1, bitorder="little").tobytes()


def unpack_indices(raw: bytes, shape: tuple[int, ...], bits: int) -> np.ndarray:
    if bits == 0:
        return np.zeros(shape, dtype=np.int64)
    n = shape[-1]
    rows = int(np.prod(shape[:-1]))
    packed = np.frombuffer(raw, dtype=np.uint8).reshape(rows, _row_bytes(n, bits))
    flat = np.unpackbits(packed, axis=1, bitorder="little")[:, :n * bits]
    planes = flat.reshape(rows, n, bits).astype(np.int64)
    return (planes << np.arange(bits)).sum(axis=2).reshape(shape)


class Codebook:
    """``k`` channel-group dictionaries of ``C`` atoms with EMA statistics."""

    def __init__(self, channels: int, groups: int = 32, atoms: int = 256,
                 decay: float = DEFAULT_DECAY, eps: float = DEFAULT_EPS,
                 dead_after: int = DEFAULT_DEAD_AFTER, seed: int = 0):
        if not 0.0 <= decay < 1.0:
            raise CodecError("EMA decay must lie in [0, 1)")
        index_width(atoms)
        self.dims = group_dims(channels, groups)
        self.channels = channels
        self.C = atoms
        self.decay = decay
        self.eps = eps
        self.dead_after = dead_after
        self.rng = np.random.default_rng(seed)
        self.atoms = [np.zeros((atoms, d), np.float32) for d in self.dims]
        self.ema_count = np.zeros((groups, atoms))
        self.ema_sum = [np.zeros((atoms, d)) for d in self.dims]
        self.unused = np.zeros((groups, atoms), dtype=np.int64)
        self.version = 0
        self.initialized = False

    @property
    def k(self) -> int:
        return len(self.dims)

    @property
    def bounds(self) -> list[tuple[int, int]]:
        edges = np.concatenate([[0], np.cumsum(self.dims)])
        return [(int(edges[g]), int(edges[g + 1])) for g in range(self.k)]

    @property
    def bits(self) -> int:
        """Size of the dictionaries as 32-bit floats: ``32 K C``."""
        return FLOAT_BITS * self.channels * self.C

    def same_layout(self, other: "Codebook") -> bool:
        return self.dims == other.dims and self.C == other.C

    # -- initialisation -------------------------------------------------
    def set_atoms(self, atoms) -> None:
        """Install explicit dictionaries, one ``(C, d_g)`` array per group.

        Each atom starts with unit EMA weight, as after a dead-atom reset.
        """
        atoms = [np.asarray(a, np.float32) for a in atoms]
        if [a.shape for a in atoms] != [(self.C, d) for d in self.dims]:
            raise CodecError(f"expected atom arrays of shapes {[(self.C, d) for d in self.dims]}")
        self.atoms = atoms
        self.ema_sum = [a.astype(np.float64) for a in atoms]
        self.ema_count[:] = 1.0
        self.unused[:] = 0
        self.initialized = True
        self.version += 1

    def initialize(self, x: np.ndarray) -> None:
        """Seed atoms from the sub-vectors of ``x`` by D^2 sampling."""
        self._check(x)
        for g, (s, e) in enumerate(self.bounds):
            v = _sub_vectors(x, s, e).astype(np.float64)
            atoms = _seed_atoms(v, self.C, self.rng)
            self.atoms[g] = atoms.astype(np.float32)
            self.ema_sum[g] = atoms.copy()
        self.ema_count[:] = 1.0
        self.unused[:] = 0
        self.initialized = True
        self.version += 1

    def _check(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise CodecError(f"codebook for {self.channels} channels got input of shape {x.shape}")

    # -- coding ---------------------------------------------------------
    def assign(self, x: np.ndarray) -> list[np.ndarray]:
        """Per-group nearest-atom indices, each flat over ``(B, N, N)``."""
        self._check(x)
        if not self.initialized:
            raise CodecError("codebook used before initialization")
        return [nearest_atoms(_sub_vectors(x, s, e), self.atoms[g])
                for g, (s, e) in enumerate(self.bounds)]

    def encode(self, x: np.ndarray, labels=None,
               assignments: list[np.ndarray] | None = None) -> QuantizedBatch:
        """Quantize ``x``; ``assignments`` may pass in a prior :meth:`assign` result."""
        b, _, n, m = x.shape
        idx = self.assign(x) if assignments is None else assignments
        dtype = np.uint8 if self.C <= 256 else np.uint16 if self.C <= 65536 else np.uint32
        stacked = np.stack([i.reshape(b, n, m) for i in idx], axis=1).astype(dtype)
        return QuantizedBatch(stacked, self.C, self.dims, self.version,
                              None if labels is None else np.asarray(labels))

    def decode(self, q: QuantizedBatch) -> np.ndarray:
        if q.dims != self.dims:
            raise CodecError(f"payload groups {q.dims} do not match codebook groups {self.dims}")
        if q.indices.size and int(q.indices.max()) >= self.C:
            raise CodecError(f"index {int(q.indices.max())} out of range for {self.C} atoms "
                             "(desynchronized codebooks?)")
        b, _, n, m = q.indices.shape
        out = np.empty((b, self.channels, n, m), dtype=np.float32)
        for g, (s, e) in enumerate(self.bounds):
            out[:, s:e] = self.atoms[g][q.indices[:, g].astype(np.intp)].transpose(0, 3, 1, 2)
        return out

    # -- learning -------------------------------------------------------
    def ema_update(self, x: np.ndarray, decay: float | None = None,
                   assignments: list[np.ndarray] | None = None,
                   replace_dead: bool = True) -> None:
        """One EMA step on the clusters induced by ``x`` under the current atoms.

        ``assignments`` may pass in the result of :meth:`assign` for ``x``
        under the current atoms, to avoid recomputing it. With
        ``replace_dead=False`` (or ``dead_after <= 0``, which disables
        replacement altogether) atoms past the dead threshold keep their value
        (and their unused count) until a later call allows replacement.
        """
        gamma = self.decay if decay is None else decay
        if not 0.0 <= gamma < 1.0:
            raise CodecError("EMA decay must lie in [0, 1)")
        if not self.initialized:
            self.initialize(x)
            assignments = None
        if assignments is None:
            assignments = self.assign(x)
        for g, idx in enumerate(assignments):
            s, e = self.bounds[g]
            v = _sub_vectors(x, s, e).astype(np.float64)
            counts = np.bincount(idx, minlength=self.C).astype(np.float64)
            sums = np.stack([np.bincount(idx, weights=v[:, i], minlength=self.C)
                             for i in range(v.shape[1])], axis=1)
            self.ema_count[g] = gamma * self.ema_count[g] + (1 - gamma) * counts
            self.ema_sum[g] = gamma * self.ema_sum[g] + (1 - gamma) * sums
            hit = counts > 0
            self.atoms[g][hit] = (self.ema_sum[g][hit]
                                  / (self.ema_count[g][hit, None] + self.eps)).astype(np.float32)
            self.unused[g][hit] = 0
            self.unused[g][~hit] += len(v)
            if self.dead_after <= 0 or not replace_dead:
                continue
            dead = np.flatnonzero(self.unused[g] >= self.dead_after)
            if dead.size:
                fresh = v[self.rng.integers(0, len(v), size=dead.size)]
                self.atoms[g][dead] = fresh.astype(np.float32)
                self.ema_sum[g][dead] = fresh
                self.ema_count[g][dead] = 1.0
                self.unused[g][dead] = 0
        self.version += 1

    def lloyd(self, x: np.ndarray, iterations: int = 10) -> None:
        """Batch k-means refinement on fixed data (exact cluster means)."""
        for _ in range(iterations):
            for g, idx in enumerate(self.assign(x)):
                s, e = self.bounds[g]
                v = _sub_vectors(x, s, e).astype(np.float64)
                counts = np.bincount(idx, minlength=self.C)
                hit = counts > 0
                sums = np.stack([np.bincount(idx, weights=v[:, i], minlength=self.C)
                                 for i in range(v.shape[1])], axis=1)
                means = sums[hit] / counts[hit, None]
                self.atoms[g][hit] = means.astype(np.float32)
        self.version += 1

    def grown(self, x: np.ndarray, factor: int = 2) -> "Codebook":
        """Copy with ``factor * C`` atoms: the current ones plus D^2-seeded extras."""
        out = Codebook(self.channels, self.k, self.C * factor, self.decay, self.eps,
                       self.dead_after)
        out.rng = np.random.default_rng(self.rng.integers(2**63))
        for g, (s, e) in enumerate(self.bounds):
            v = _sub_vectors(x, s, e).astype(np.float64)
            base = self.atoms[g].astype(np.float64)
            extra = _seed_atoms(v, out.C - self.C, out.rng, existing=base)
            out.atoms[g] = np.concatenate([self.atoms[g], extra.astype(np.float32)])
            out.ema_sum[g] = out.atoms[g].astype(np.float64)
        out.ema_count[:] = 1.0
        out.initialized = True
        out.version = self.version + 1
        return out

    def reconstruction_error(self, x: np.ndarray) -> float:
        """Mean squared reconstruction error per value."""
        return float(np.mean((x.astype(np.float64) - self.decode(self.encode(x))) ** 2))

    # -- snapshots ------------------------------------------------------
    def copy(self) -> "Codebook":
        out = Codebook.__new__(Codebook)
        out.__dict__.update(self.__dict__)
        out.atoms = [a.copy() for a in self.atoms]
        out.ema_count = self.ema_count.copy()
        out.ema_sum = [s.copy() for s in self.ema_sum]
        out.unused = self.unused.copy()
        out.rng = copy.deepcopy(self.rng)
        return out

    def load_atoms(self, other: "Codebook") -> None:
        """Overwrite atoms and version with ``other``'s (a decoder refresh)."""
        if not self.same_layout(other):
            raise CodecError(f"codebook layout mismatch: {self.dims}x{self.C} vs "
                             f"{other.dims}x{other.C}")
        self.atoms = [a.copy() for a in other.atoms]
        self.version = other.version
        self.initialized = other.initialized

    def to_bytes(self) -> bytes:
        head = struct.pack("<4sQHI", CODEBOOK_MAGIC, self.version, self.k, self.C)
        head += struct.pack(f"<{self.k}H", *self.dims)
        return head + b"".join(a.astype("<f4").tobytes() for a in self.atoms)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Codebook":
        fixed = struct.calcsize("<4sQHI")
        if len(raw) < fixed:
            raise CodecError(f"codebook header truncated at byte offset {len(raw)}")
        magic, version, k, c = struct.unpack_from("<4sQHI", raw)
        if magic != CODEBOOK_MAGIC:
            raise CodecError(f"bad magic {magic!r} at byte offset 0")
        if len(raw) < fixed + 2 * k:
            raise CodecError(f"group table truncated at byte offset {len(raw)}")
        dims = struct.unpack_from(f"<{k}H", raw, fixed)
        off = fixed + 2 * k
        expected = off + 4 * c * sum(dims)
        if len(raw) != expected:
            raise CodecError(f"expected {expected} bytes, found {len(raw)}")
        cb = cls(sum(dims), k, c)
        if cb.dims != tuple(dims):
            raise CodecError(f"group widths {dims} are not a valid split of {sum(dims)} channels")
        for g, d in enumerate(dims):
            cb.atoms[g] = np.frombuffer(raw, "<f4", c * d, off).reshape(c, d).astype(np.float32)
            off += 4 * c * d
        cb.ema_sum = [a.astype(np.float64) for a in cb.atoms]
        cb.ema_count[:] = 1.0
        cb.version = version
        cb.initialized = True
        return cb


def _seed_atoms(v: np.ndarray, count: int, rng: np.random.Generator,
                existing: np.ndarray | None = None) -> np.ndarray:
    """D^2 sampling of ``count`` rows of ``v`` (k-means++ seeding, no iterations)."""
    n = len(v)
    out = np.empty((count, v.shape[1]))
    if existing is not None and len(existing):
        d2 = ((v[:, None, :] - existing[None]) ** 2).sum(-1).min(axis=1)
        start = 0
    else:
        out[0] = v[rng.integers(n)]
        d2 = ((v - out[0]) ** 2).sum(axis=1)
        start = 1
    for i in range(start, count):
        total = d2.sum()
        j = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        out[i] = v[j]
        d2 = np.minimum(d2, ((v - out[i]) ** 2).sum(axis=1))
    return out


# -- module-level operations ---------------------------------------------
def encode(x: np.ndarray, cb: Codebook, labels=None) -> QuantizedBatch:
    return cb.encode(x, labels)


def decode(q: QuantizedBatch, cb: Codebook) -> np.ndarray:
    return cb.decode(q)


def ema_update(cb: Codebook, x: np.ndarray, decay: float = DEFAULT_DECAY) -> None:
    cb.ema_update(x, decay)


@dataclass(frozen=True)
class SyncPolicy:
    """When the decoder copy is refreshed from the encoder.

    ``rate`` (a fraction ``alpha`` of steps) fires at step ``t`` (1-based)
    exactly when ``floor(t * alpha)`` increments, so ``alpha = 1/T`` fires on
    multiples of ``T``; ``period`` fires on multiples of ``T_code``.
    """

    rate: Fraction | None = None
    period: int | None = None

    def __post_init__(self):
        if (self.rate is None) == (self.period is None):
            raise ValueError("give exactly one of rate or period")
        if self.rate is not None and not 0 <= self.rate <= 1:
            raise ValueError("sync rate must lie in [0, 1]")
        if self.period is not None and self.period < 1:
            raise ValueError("sync period must be >= 1")

    @classmethod
    def at_rate(cls, alpha) -> "SyncPolicy":
        return cls(rate=Fraction(str(alpha)) if isinstance(alpha, float) else Fraction(alpha))

    @classmethod
    def every(cls, period: int) -> "SyncPolicy":
        return cls(period=int(period))

    @property
    def alpha(self) -> Fraction:
        """Long-run fraction of steps on which the policy fires."""
        return self.rate if self.rate is not None else Fraction(1, self.period)

    def fires(self, step: int) -> bool:
        if step < 1:
            raise ValueError("steps are counted from 1")
        if self.period is not None:
            return step % self.period == 0
        return math.floor(step * self.rate) > math.floor((step - 1) * self.rate)


def sync_codebooks(encoder: Codebook, decoder: Codebook, policy: SyncPolicy, step: int) -> bool:
    """Refresh ``decoder`` from ``encoder`` if ``policy`` fires at ``step``."""
    if not encoder.same_layout(decoder):
        raise CodecError("encoder and decoder codebooks have different layouts")
    if policy.fires(step):
        decoder.load_atoms(encoder)
        return True
    return False


# -- bit accounting ---------------------------------------------------------
def _q(v) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(str(v)) if isinstance(v, float) else Fraction(v)


def batch_bits(B: int, N: int, K_prev: int, K: int, C: int, k: int, alpha=1) -> Fraction:
    """Bits exchanged per batch by a quantized module:
    ``B k N^2 ceil(log2 C) + alpha 32 (K + K_prev) C``."""
    a = _q(alpha)
    if not 0 <= a <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    return Fraction(B * k * N * N * index_width(C)) + a * FLOAT_BITS * (K + K_prev) * C


def raw_batch_bits(B: int, N: int, K: int) -> int:
    return FLOAT_BITS * B * N * N * K


def bandwidth_compression(B: int, N: int, K_prev: int, K: int, C: int, k: int,
                          alpha=1) -> Fraction:
    return raw_batch_bits(B, N, K) / batch_bits(B, N, K_prev, K, C, k, alpha)


def buffer_bits(M: int, N: int, K: int, C: int, k: int) -> int:
    """Quantized buffer of ``M`` samples plus one dictionary: ``M k N^2 ceil(log2 C) + 32 K C``."""
    return M * k * N * N * index_width(C) + FLOAT_BITS * K * C


def buffer_compression(M: int, N: int, K: int, C: int, k: int) -> Fraction:
    return Fraction(FLOAT_BITS * M * N * N * K, buffer_bits(M, N, K, C, k))


def buffer_compression_limit(K: int, C: int, k: int) -> Fraction:
    """Value approached by :func:`buffer_compression` as ``M`` grows."""
    return Fraction(FLOAT_BITS * K, k * index_width(C))


def fixed_budget_capacity(raw_samples: int, N: int, K: int, C: int, k: int,
                          K_prev: int = 0) -> int:
    """Largest quantized buffer (samples) fitting the memory of a raw buffer of
    ``raw_samples`` samples, when the node also stores dictionaries of
    ``K + K_prev`` channels."""
    budget = raw_batch_bits(raw_samples, N, K)
    left = budget - FLOAT_BITS * (K + K_prev) * C
    per_sample = k * N * N * index_width(C)
    if left < 0:
        return 0
    if per_sample == 0:
        raise ValueError("a single-atom codebook stores samples for free")
    return left // per_sample


@dataclass(frozen=True)
class LayerGeometry:
    N: int
    K: int
    K_prev: int


#: Four-module network used for the compression figures: spatial sizes,
#: channel widths, and input widths of every quantized layer.
REFERENCE_GEOMETRY = (LayerGeometry(32, 128, 3), LayerGeometry(16, 256, 128),
                      LayerGeometry(16, 256, 256), LayerGeometry(8, 512, 256))


@dataclass
class CompressionRow:
    layer: int
    N: int
    K: int
    K_prev: int
    atoms: int
    memory: int
    bandwidth: Fraction
    buffer: Fraction


def compression_table(geometry=REFERENCE_GEOMETRY, atoms=(256,), memory=(256,),
                      batch: int = 128, groups: int = 32, alpha=1) -> list[CompressionRow]:
    """Bandwidth and buffer factors for every layer and every (C, M) pair."""
    rows = []
    for layer, g in enumerate(geometry, start=1):
        for c in atoms:
            for m in memory:
                rows.append(CompressionRow(
                    layer, g.N, g.K, g.K_prev, c, m,
                    bandwidth_compression(batch, g.N, g.K_prev, g.K, c, groups, alpha),
                    buffer_compression(m, g.N, g.K, c, groups)))
    return rows
