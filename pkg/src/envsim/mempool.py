"""Content-addressed block store standing in for shared CXL / RDMA memory pools.

Pools are append-only: blocks are allocated with a bump pointer and never
freed or rewritten.  Inserting content that is already present only bumps a
reference count, which is what makes cross-function and cross-node
deduplication fall out of the data structure.
"""
from __future__ import annotations

import bisect
import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EnvSimError
from .units import PAGE_SIZE


class PoolFull(EnvSimError):
    pass


class UnsupportedAccess(EnvSimError):
    pass


class PoolKind(str, enum.Enum):
    CXL = "CXL"
    RDMA = "RDMA"
    LOCAL = "LOCAL"


class AccessKind(str, enum.Enum):
    DIRECT_READ = "direct_read"
    LAZY_FETCH = "lazy_fetch"


@dataclass(frozen=True, order=True)
class BlockRef:
    """Machine-independent pointer into a pool: (pool kind, byte offset)."""

    pool: PoolKind
    offset: int

    def __post_init__(self):
        if self.offset < 0 or self.offset % PAGE_SIZE:
            raise ValueError(f"block offset {self.offset:#x} is not 4 KiB aligned")


@dataclass
class LatencyParams:
    read_latency_ns: float = 641.1  # per direct load served from the pool
    fetch_latency_us: float = 6.0  # per 4 KiB block moved on a fault
    fault_handling_us: float = 2.0  # kernel fault entry/exit + page allocation
    tail_knee: float = 0.5
    tail_max: float = 5.0
    jitter_sigma: float = 0.0

    def __post_init__(self):
        for name in ("read_latency_ns", "fetch_latency_us", "fault_handling_us", "jitter_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tail_max < 1.0:
            raise ValueError("tail_max must be >= 1")
        if not 0.0 <= self.tail_knee < 1.0:
            raise ValueError("tail_knee must be in [0, 1)")

    def tail_multiplier(self, load: float) -> float:
        """Flat at 1 below the knee, then a linear ramp to ``tail_max`` at full load."""
        load = min(max(load, 0.0), 1.0)
        if load <= self.tail_knee:
            return 1.0
        return 1.0 + (self.tail_max - 1.0) * (load - self.tail_knee) / (1.0 - self.tail_knee)


def default_latency(kind: PoolKind) -> LatencyParams:
    if kind is PoolKind.CXL:
        # a fault on CXL only happens for CoW; the 4 KiB copy is ~64 line reads
        return LatencyParams(fetch_latency_us=1.0, tail_max=1.0)
    if kind is PoolKind.RDMA:
        return LatencyParams()
    return LatencyParams(read_latency_ns=0.0, fetch_latency_us=0.5, tail_max=1.0)


def content_hash(content_id) -> bytes:
    """Stable 128-bit digest of a synthetic page content id."""
    return hashlib.blake2b(repr(content_id).encode(), digest_size=16).digest()


@dataclass
class PoolStore:
    kind: PoolKind
    capacity_bytes: int
    latency: LatencyParams = None
    blocks: dict = field(default_factory=dict)  # content hash -> BlockRef
    refcounts: dict = field(default_factory=dict)  # BlockRef -> int
    _sizes: dict = field(default_factory=dict, repr=False)  # offset -> pages
    _by_offset: dict = field(default_factory=dict, repr=False)  # offset -> hash
    _starts: list = field(default_factory=list, repr=False)  # block offsets, ascending
    _next_offset: int = field(default=0, repr=False)

    def __post_init__(self):
        self.kind = PoolKind(self.kind)
        if self.latency is None:
            self.latency = default_latency(self.kind)
        if self.capacity_bytes < 0:
            raise ValueError("capacity_bytes must be >= 0")

    @property
    def used_bytes(self) -> int:
        return self._next_offset

    def __contains__(self, chash) -> bool:
        return chash in self.blocks

    def block_size_pages(self, ref: BlockRef) -> int:
        return self._sizes[ref.offset]

    def hash_at(self, offset: int) -> bytes:
        """Content hash of the block covering ``offset`` (block start or interior page)."""
        if offset in self._by_offset:
            return self._by_offset[offset]
        idx = bisect.bisect_right(self._starts, offset) - 1
        if idx >= 0:
            start = self._starts[idx]
            if offset < start + self._sizes[start] * PAGE_SIZE:
                return self._by_offset[start]
        raise KeyError(offset)

    def valid_offset(self, offset: int, length: int = PAGE_SIZE) -> bool:
        return offset % PAGE_SIZE == 0 and 0 <= offset and offset + length <= self._next_offset

    def to_manifest(self) -> dict:
        return {
            "kind": self.kind.value,
            "capacity_bytes": self.capacity_bytes,
            "used_bytes": self.used_bytes,
            "blocks": [
                {
                    "offset": ref.offset,
                    "size_pages": self._sizes[ref.offset],
                    "hash": h.hex(),
                    "refcount": self.refcounts[ref],
                }
                for h, ref in sorted(self.blocks.items(), key=lambda kv: kv[1].offset)
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_manifest(), sort_keys=True, indent=1)

    @classmethod
    def from_manifest(cls, data: dict, latency: Optional[LatencyParams] = None) -> "PoolStore":
        pool = cls(PoolKind(data["kind"]), int(data["capacity_bytes"]), latency)
        for b in sorted(data["blocks"], key=lambda b: b["offset"]):
            ref = BlockRef(pool.kind, int(b["offset"]))
            h = bytes.fromhex(b["hash"])
            pool.blocks[h] = ref
            pool.refcounts[ref] = int(b["refcount"])
            pool._sizes[ref.offset] = int(b["size_pages"])
            pool._by_offset[ref.offset] = h
            pool._starts.append(ref.offset)
            pool._next_offset = max(pool._next_offset, ref.offset + b["size_pages"] * PAGE_SIZE)
        return pool


def dedup_insert(pool: PoolStore, chash: bytes, size: int = 1) -> BlockRef:
    """Store ``size`` pages of content ``chash`` unless an identical block exists.

    Returns the block's ref; a repeated hash only increments its refcount.
    """
    ref = pool.blocks.get(chash)
    if ref is not None:
        pool.refcounts[ref] += 1
        return ref
    if size < 1:
        raise ValueError("size must be at least one page")
    nbytes = size * PAGE_SIZE
    if pool._next_offset + nbytes > pool.capacity_bytes:
        raise PoolFull(
            f"{pool.kind.value} pool: need {nbytes} bytes, "
            f"{pool.capacity_bytes - pool._next_offset} free"
        )
    ref = BlockRef(pool.kind, pool._next_offset)
    pool._next_offset += nbytes
    pool.blocks[chash] = ref
    pool.refcounts[ref] = 1
    pool._sizes[ref.offset] = size
    pool._by_offset[ref.offset] = chash
    pool._starts.append(ref.offset)
    return ref


def pool_usage(pool: PoolStore) -> int:
    """Bytes occupied by distinct blocks."""
    return pool.used_bytes


def sample_access_latency(pool: PoolStore, kind: AccessKind, current_load: float,
                          rng: Optional[np.random.Generator] = None) -> float:
    """Latency in microseconds of one remote access.

    A direct read is a single load served in place (CXL only); a lazy fetch is
    a fault that moves a 4 KiB block into local memory.
    """
    if not 0.0 <= current_load <= 1.0:
        raise ValueError(f"load must be in [0, 1], got {current_load}")
    kind = AccessKind(kind)
    p = pool.latency
    if kind is AccessKind.DIRECT_READ:
        if pool.kind is PoolKind.RDMA:
            raise UnsupportedAccess("RDMA pools are not byte-addressable")
        lat = p.read_latency_ns / 1000.0
    else:
        lat = p.fault_handling_us + p.fetch_latency_us * p.tail_multiplier(current_load)
    if p.jitter_sigma > 0:
        if rng is None:
            raise ValueError("jittered latency needs an rng")
        lat *= float(rng.lognormal(-0.5 * p.jitter_sigma ** 2, p.jitter_sigma))
    return lat
