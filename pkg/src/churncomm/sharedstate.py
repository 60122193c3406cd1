"""Deterministic content hashing and shared-state digest types.

The hash treats the buffer as little-endian 32-bit words (final partial
word zero-padded). Word i feeds lane (i mod 256); each of the 256 lanes
runs FNV-1a-64 over its words in index order; the lane values are folded
by a depth-8 binary tree with combine(a, b) = (a XOR rotl(b, 27)) * prime,
and the root is XORed with the buffer byte length. The result is
independent of how many worker contexts computed the lanes.

simplehash_reference is the normative single-context oracle: plain loops,
no vectorization. simplehash must agree with it bit for bit.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .wire import DType, DTYPE_WIDTH

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
LANES = 256
TREE_DEPTH = 8
ROTATE = 27

_MASK64 = (1 << 64) - 1

_U64_PRIME = np.uint64(FNV_PRIME)
_U64_ROT = np.uint64(ROTATE)
_U64_ROT_INV = np.uint64(64 - ROTATE)


def _as_bytes(buffer) -> memoryview:
    """Flat read-only byte view of any contiguous buffer."""
    mv = memoryview(buffer)
    if not mv.contiguous:
        raise ValueError("buffer must be contiguous")
    return mv.cast("B")


def _word_array(data: memoryview) -> np.ndarray:
    """Little-endian u32 words, final partial word zero-padded."""
    n = len(data)
    full = n // 4
    words = np.frombuffer(data, dtype="<u4", count=full)
    if n % 4:
        tail = bytes(data[full * 4 :]) + b"\x00" * (4 - n % 4)
        last = np.frombuffer(tail, dtype="<u4")
        words = np.concatenate([words, last])
    return words


def _lane_slice(words: np.ndarray, lo: int, hi: int, out: np.ndarray) -> None:
    """Run the per-lane FNV-1a chains for lanes [lo, hi) into out[lo:hi]."""
    n_words = len(words)
    full_rounds = n_words // LANES
    rem = n_words % LANES
    h = out[lo:hi]
    if full_rounds:
        mat = words[: full_rounds * LANES].reshape(full_rounds, LANES)
        for r in range(full_rounds):
            np.bitwise_xor(h, mat[r, lo:hi].astype(np.uint64), out=h)
            np.multiply(h, _U64_PRIME, out=h)
    if rem > lo:
        k = min(hi, rem)
        part = h[: k - lo]
        np.bitwise_xor(part, words[full_rounds * LANES + lo : full_rounds * LANES + k].astype(np.uint64), out=part)
        np.multiply(part, _U64_PRIME, out=part)


def _tree_fold(lanes: np.ndarray, nbytes: int) -> int:
    level = lanes
    for _ in range(TREE_DEPTH):
        a = level[0::2].copy()
        b = level[1::2]
        rotated = (b << _U64_ROT) | (b >> _U64_ROT_INV)
        np.bitwise_xor(a, rotated, out=a)
        np.multiply(a, _U64_PRIME, out=a)
        level = a
    return int(level[0]) ^ nbytes


def simplehash(buffer, workers: int = 1) -> int:
    """64-bit content hash, identical for any worker count."""
    data = _as_bytes(buffer)
    words = _word_array(data)
    lanes = np.full(LANES, FNV_OFFSET, dtype=np.uint64)
    if workers <= 1 or len(words) < LANES:
        _lane_slice(words, 0, LANES, lanes)
    else:
        bounds = [round(i * LANES / workers) for i in range(workers + 1)]
        threads = [
            threading.Thread(target=_lane_slice, args=(words, lo, hi, lanes))
            for lo, hi in zip(bounds, bounds[1:])
            if hi > lo
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    return _tree_fold(lanes, len(data))


def simplehash_reference(buffer) -> int:
    """Ground-truth scalar implementation of the identical algorithm."""
    data = _as_bytes(buffer)
    n = len(data)
    raw = bytes(data)
    if n % 4:
        raw += b"\x00" * (4 - n % 4)
    lanes = [FNV_OFFSET] * LANES
    for i in range(len(raw) // 4):
        word = int.from_bytes(raw[i * 4 : i * 4 + 4], "little")
        lane = i % LANES
        lanes[lane] = ((lanes[lane] ^ word) * FNV_PRIME) & _MASK64
    level = lanes
    for _ in range(TREE_DEPTH):
        nxt = []
        for j in range(0, len(level), 2):
            a, b = level[j], level[j + 1]
            rotated = ((b << ROTATE) | (b >> (64 - ROTATE))) & _MASK64
            nxt.append(((a ^ rotated) * FNV_PRIME) & _MASK64)
        level = nxt
    return level[0] ^ n


# ---------------------------------------------------------------------------
# Shared-state entries and digests
# ---------------------------------------------------------------------------


@dataclass
class SharedStateEntry:
    """One keyed, caller-owned buffer participating in state sync.

    The revision is advanced by the application and must never decrease
    over the peer's lifetime. Hashing covers the raw bytes; dtype only
    matters for collectives.
    """

    key: str
    dtype: DType
    buffer: object
    revision: int = 0

    def __post_init__(self):
        nbytes = len(_as_bytes(self.buffer))
        width = DTYPE_WIDTH[DType(self.dtype)]
        if nbytes % width:
            raise ValueError(
                f"entry {self.key!r}: {nbytes} bytes not divisible by element width {width}"
            )

    @property
    def nbytes(self) -> int:
        return len(_as_bytes(self.buffer))

    def readonly_view(self) -> memoryview:
        return _as_bytes(self.buffer)

    def writable_view(self) -> memoryview:
        mv = memoryview(self.buffer)
        if mv.readonly:
            raise ValueError(f"entry {self.key!r} is not writable")
        return mv.cast("B")

    def content_hash(self, workers: int = 1) -> int:
        return simplehash(self.readonly_view(), workers=workers)


def digest_entries(entries: list[SharedStateEntry]) -> list[tuple[str, int, int]]:
    """Per-entry (key, revision, hash) triples; two digests are equal iff
    all triples match."""
    return [(e.key, e.revision, e.content_hash()) for e in entries]


class SyncStatus(Enum):
    IN_SYNC = "in_sync"
    UPDATED = "updated"
    ERROR = "error"


@dataclass
class SyncOutcomeResult:
    status: SyncStatus
    updated_keys: list[str] = field(default_factory=list)
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status is not SyncStatus.ERROR
