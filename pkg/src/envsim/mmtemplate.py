"""Memory templates: attachable, metadata-only descriptions of a process image.

A template holds a VMA layout plus a page map into shared pools.  CXL pages
are installed valid and write-protected so reads are served in place; RDMA
pages are installed invalid and fetched on first touch.  Attaching copies
only the metadata, so any number of address spaces can share one template
and diverge through copy-on-write.
"""
from __future__ import annotations

import bisect
import enum
import itertools
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

import numpy as np

from .errors import EnvSimError
from .mempool import AccessKind, BlockRef, PoolKind, PoolStore, sample_access_latency
from .units import PAGE_SIZE

HEADER_BYTES = 4096
VMA_RECORD_BYTES = 128
# compact PTE: 32-bit pool page-frame number incl. pool-type and flag bits
PTE_RECORD_BYTES = 4


class OverlapError(EnvSimError):
    pass


class AlignmentError(EnvSimError):
    pass


class UnmappedRange(EnvSimError):
    pass


class BadOffset(EnvSimError):
    pass


class IncompleteTemplate(EnvSimError):
    pass


class SegmentationError(EnvSimError):
    pass


class Prot(enum.IntFlag):
    NONE = 0
    READ = 1
    WRITE = 2
    EXEC = 4


class MappingKind(str, enum.Enum):
    ANONYMOUS = "anonymous"
    FILE_BACKED = "file_backed"


class Outcome(str, enum.Enum):
    DIRECT = "direct"
    MAJOR_FAULT_FETCH = "major_fault_fetch"
    COW_COPY = "cow_copy"
    PRIVATE_HIT = "private_hit"
    ZERO_FILL = "zero_fill"


@dataclass(frozen=True)
class VmaDescriptor:
    va_start: int
    length: int
    prot: Prot = Prot.READ
    mapping_kind: MappingKind = MappingKind.ANONYMOUS
    share: str = "private"
    file_ref: Optional[str] = None
    file_off: int = 0
    zero_fill: bool = False

    @property
    def va_end(self) -> int:
        return self.va_start + self.length

    @property
    def first_page(self) -> int:
        return self.va_start // PAGE_SIZE

    @property
    def npages(self) -> int:
        return self.length // PAGE_SIZE

    def to_dict(self) -> dict:
        return {
            "va_start": self.va_start,
            "length": self.length,
            "prot": int(self.prot),
            "mapping_kind": self.mapping_kind.value,
            "share": self.share,
            "file_ref": self.file_ref,
            "file_off": self.file_off,
            "zero_fill": self.zero_fill,
        }


@dataclass(frozen=True)
class PteEntry:
    block: BlockRef
    valid: bool
    write_protected: bool


@dataclass(frozen=True)
class PteRun:
    first_page: int
    npages: int
    pool: PoolKind
    pool_offset: int
    valid: bool
    write_protected: bool

    @property
    def end_page(self) -> int:
        return self.first_page + self.npages


class PteMap(Mapping):
    """virtual page -> PteEntry, stored as sorted runs of consecutive pages."""

    def __init__(self):
        self._starts: list[int] = []
        self._runs: list[PteRun] = []
        self._count = 0

    def _find(self, vpn: int) -> Optional[PteRun]:
        i = bisect.bisect_right(self._starts, vpn) - 1
        if i >= 0:
            run = self._runs[i]
            if vpn < run.end_page:
                return run
        return None

    def add_run(self, run: PteRun) -> None:
        i = bisect.bisect_left(self._starts, run.first_page)
        if i > 0 and self._runs[i - 1].end_page > run.first_page:
            raise OverlapError(f"PTEs already installed at page {run.first_page:#x}")
        if i < len(self._runs) and self._runs[i].first_page < run.end_page:
            raise OverlapError(f"PTEs already installed at page {self._runs[i].first_page:#x}")
        # coalesce with the previous run when it continues seamlessly
        if i > 0:
            prev = self._runs[i - 1]
            if (prev.end_page == run.first_page and prev.pool == run.pool
                    and prev.valid == run.valid and prev.write_protected == run.write_protected
                    and prev.pool_offset + prev.npages * PAGE_SIZE == run.pool_offset):
                self._runs[i - 1] = PteRun(prev.first_page, prev.npages + run.npages, prev.pool,
                                           prev.pool_offset, prev.valid, prev.write_protected)
                self._count += run.npages
                return
        self._starts.insert(i, run.first_page)
        self._runs.insert(i, run)
        self._count += run.npages

    def runs(self) -> list[PteRun]:
        return list(self._runs)

    def covered(self, first_page: int, npages: int) -> int:
        """Number of pages in [first_page, first_page + npages) that have PTEs."""
        end = first_page + npages
        total = 0
        i = max(bisect.bisect_right(self._starts, first_page) - 1, 0)
        while i < len(self._runs) and self._runs[i].first_page < end:
            r = self._runs[i]
            total += max(0, min(end, r.end_page) - max(first_page, r.first_page))
            i += 1
        return total

    def __getitem__(self, vpn: int) -> PteEntry:
        run = self._find(vpn)
        if run is None:
            raise KeyError(vpn)
        off = run.pool_offset + (vpn - run.first_page) * PAGE_SIZE
        return PteEntry(BlockRef(run.pool, off), run.valid, run.write_protected)

    def __contains__(self, vpn) -> bool:
        return self._find(vpn) is not None

    def __len__(self) -> int:
        return self._count

    def __iter__(self) -> Iterator[int]:
        for run in self._runs:
            yield from range(run.first_page, run.end_page)


@dataclass
class FaultModelParams:
    attach_cost_container_ms: float = 2.5
    attach_cost_vm_ms: float = 40.0
    cow_copy_cost_us: float = 5.0
    minor_fault_cost_us: float = 1.0
    # last-level-cache-missing loads per touched read-only page
    cxl_loads_per_read_page: float = 2.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


_template_ids = itertools.count(1)


@dataclass
class MmTemplate:
    id: int
    function_id: str
    vmas: list = field(default_factory=list)
    ptes: PteMap = field(default_factory=PteMap)
    pools: dict = field(default_factory=dict, repr=False)  # PoolKind -> PoolStore
    _vma_starts: list = field(default_factory=list, repr=False, compare=False)

    @property
    def metadata_bytes(self) -> int:
        return HEADER_BYTES + VMA_RECORD_BYTES * len(self.vmas) + PTE_RECORD_BYTES * len(self.ptes)

    @property
    def image_pages(self) -> int:
        return sum(v.npages for v in self.vmas)

    def mapped_pages(self) -> np.ndarray:
        """Virtual page numbers of every mapped page, in address order."""
        if not self.vmas:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([np.arange(v.first_page, v.first_page + v.npages, dtype=np.int64)
                               for v in self.vmas])

    def writable_pages(self) -> np.ndarray:
        parts = [np.arange(v.first_page, v.first_page + v.npages, dtype=np.int64)
                 for v in self.vmas if v.prot & Prot.WRITE]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def find_vma(self, vpn: int) -> Optional[VmaDescriptor]:
        addr = vpn * PAGE_SIZE
        if len(self._vma_starts) != len(self.vmas):
            self._vma_starts = [v.va_start for v in self.vmas]
        i = bisect.bisect_right(self._vma_starts, addr) - 1
        if i >= 0 and addr < self.vmas[i].va_end:
            return self.vmas[i]
        return None

    def is_complete(self) -> bool:
        return all(v.zero_fill or self.ptes.covered(v.first_page, v.npages) == v.npages
                   for v in self.vmas)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "function_id": self.function_id,
            "metadata_bytes": self.metadata_bytes,
            "vmas": [v.to_dict() for v in self.vmas],
            "pte_runs": [
                {
                    "va": r.first_page * PAGE_SIZE,
                    "npages": r.npages,
                    "pool": r.pool.value,
                    "pool_offset": r.pool_offset,
                    "valid": r.valid,
                    "write_protected": r.write_protected,
                }
                for r in self.ptes.runs()
            ],
        }


def mmt_create(function_id: str) -> MmTemplate:
    return MmTemplate(id=next(_template_ids), function_id=function_id)


def mmt_add_map(tpl: MmTemplate, va: int, length: int, prot=Prot.READ, flags: str = "private",
                file_ref: Optional[str] = None, file_off: int = 0, *,
                zero_fill: bool = False) -> VmaDescriptor:
    """Record a private mapping ``[va, va+length)``; no PTEs are installed."""
    if va % PAGE_SIZE or length % PAGE_SIZE:
        raise AlignmentError(f"mapping {va:#x}+{length:#x} is not page aligned")
    if length <= 0:
        raise AlignmentError("mapping length must be positive")
    if flags != "private":
        raise ValueError("only private mappings can be templated")
    kind = MappingKind.FILE_BACKED if file_ref is not None else MappingKind.ANONYMOUS
    vma = VmaDescriptor(va, length, Prot(prot), kind, flags, file_ref, file_off, zero_fill)
    starts = [v.va_start for v in tpl.vmas]
    i = bisect.bisect_left(starts, va)
    if i > 0 and tpl.vmas[i - 1].va_end > va:
        raise OverlapError(f"{va:#x} overlaps VMA at {tpl.vmas[i - 1].va_start:#x}")
    if i < len(tpl.vmas) and tpl.vmas[i].va_start < va + length:
        raise OverlapError(f"{va:#x} overlaps VMA at {tpl.vmas[i].va_start:#x}")
    tpl.vmas.insert(i, vma)
    return vma


def mmt_setup_pt(tpl: MmTemplate, va: int, length: int, pool_offset: int,
                 pool: Union[PoolStore, PoolKind]) -> None:
    """Point the pages of ``[va, va+length)`` at consecutive pool pages.

    CXL entries become valid and write-protected; RDMA entries stay invalid
    and carry the remote address for the fault handler.
    """
    if va % PAGE_SIZE or length % PAGE_SIZE or length <= 0:
        raise AlignmentError(f"range {va:#x}+{length:#x} is not page aligned")
    if isinstance(pool, PoolStore):
        store, kind = pool, pool.kind
        if not store.valid_offset(pool_offset, length):
            raise BadOffset(f"offset {pool_offset:#x}+{length:#x} outside {kind.value} pool contents")
    else:
        kind = PoolKind(pool)
        store = tpl.pools.get(kind) or PoolStore(kind, 0)
        if pool_offset % PAGE_SIZE or pool_offset < 0:
            raise BadOffset(f"offset {pool_offset:#x} is not page aligned")
    tpl.pools.setdefault(kind, store)
    first, n = va // PAGE_SIZE, length // PAGE_SIZE
    # the range must be fully covered by existing VMAs, with no holes
    vpn = first
    while vpn < first + n:
        vma = tpl.find_vma(vpn)
        if vma is None:
            raise UnmappedRange(f"page {vpn * PAGE_SIZE:#x} is not inside any VMA")
        vpn = vma.first_page + vma.npages
    valid = kind is not PoolKind.RDMA
    tpl.ptes.add_run(PteRun(first, n, kind, pool_offset, valid, True))


@dataclass
class PrivatePage:
    origin: object  # content token the page was copied from
    version: int = 0
    writable: bool = True


@dataclass
class FaultCounters:
    minor_faults: int = 0
    major_faults: int = 0
    cow_faults: int = 0


class AddressSpace:
    """One process's view of an attached template plus its private pages."""

    def __init__(self, tpl: MmTemplate, process_id: int, params: FaultModelParams):
        self.template = tpl
        self.template_id = tpl.id
        self.process_id = process_id
        self.params = params
        self.private_pages: dict[int, PrivatePage] = {}
        self.faults = FaultCounters()
        self.local_vmas: list[VmaDescriptor] = []

    @property
    def local_bytes(self) -> int:
        return PAGE_SIZE * len(self.private_pages) + self.template.metadata_bytes

    @property
    def residencies(self) -> int:
        return len(self.private_pages)

    def grow_heap(self, va: int, length: int) -> VmaDescriptor:
        """Extend the address space with local zero-fill memory (never pool-backed)."""
        if va % PAGE_SIZE or length % PAGE_SIZE or length <= 0:
            raise AlignmentError("heap growth must be page aligned")
        for v in list(self.template.vmas) + self.local_vmas:
            if va < v.va_end and v.va_start < va + length:
                raise OverlapError(f"heap growth at {va:#x} overlaps {v.va_start:#x}")
        vma = VmaDescriptor(va, length, Prot.READ | Prot.WRITE, zero_fill=True)
        self.local_vmas.append(vma)
        return vma

    def _vma(self, vpn: int) -> VmaDescriptor:
        vma = self.template.find_vma(vpn)
        if vma is None:
            addr = vpn * PAGE_SIZE
            for v in self.local_vmas:
                if v.va_start <= addr < v.va_end:
                    return v
            raise SegmentationError(f"access to unmapped page {addr:#x}")
        return vma

    def _pool_token(self, pte: PteEntry):
        store = self.template.pools[pte.block.pool]
        return (pte.block.pool.value, store.hash_at(pte.block.offset).hex(), pte.block.offset)

    def load(self, vpn: int):
        """Content currently visible at ``vpn``: a pool token or a private (origin, version)."""
        page = self.private_pages.get(vpn)
        if page is not None:
            return (page.origin, page.version)
        self._vma(vpn)
        pte = self.template.ptes.get(vpn)
        if pte is None:
            return ("zero", 0)
        return (self._pool_token(pte), 0)

    def handle_access(self, vpn: int, is_write: bool, load: float = 0.0,
                      rng: Optional[np.random.Generator] = None) -> tuple[Outcome, float]:
        """Model one access; returns the outcome and its latency in microseconds."""
        p = self.params
        page = self.private_pages.get(vpn)
        if page is not None:
            if is_write:
                if not page.writable:
                    # clean copy of a lazily fetched page: drop write protection
                    page.writable = True
                    self.faults.cow_faults += 1
                    page.version += 1
                    return Outcome.COW_COPY, p.minor_fault_cost_us
                page.version += 1
            return Outcome.PRIVATE_HIT, 0.0

        vma = self._vma(vpn)
        if is_write and not vma.prot & Prot.WRITE:
            raise SegmentationError(f"write to read-only page {vpn * PAGE_SIZE:#x}")
        pte = self.template.ptes.get(vpn)
        if pte is None:
            if not vma.zero_fill:
                raise SegmentationError(f"no PTE for page {vpn * PAGE_SIZE:#x}")
            self.private_pages[vpn] = PrivatePage("zero", 1 if is_write else 0)
            self.faults.minor_faults += 1
            return Outcome.ZERO_FILL, p.minor_fault_cost_us

        store = self.template.pools[pte.block.pool]
        if pte.valid:
            if not is_write:
                return Outcome.DIRECT, sample_access_latency(store, AccessKind.DIRECT_READ, load, rng)
            self.private_pages[vpn] = PrivatePage(self._pool_token(pte), 1)
            self.faults.cow_faults += 1
            return Outcome.COW_COPY, p.cow_copy_cost_us

        lat = sample_access_latency(store, AccessKind.LAZY_FETCH, load, rng)
        self.faults.major_faults += 1
        if is_write:
            self.faults.cow_faults += 1
            self.private_pages[vpn] = PrivatePage(self._pool_token(pte), 1)
        else:
            self.private_pages[vpn] = PrivatePage(self._pool_token(pte), 0, writable=False)
        return Outcome.MAJOR_FAULT_FETCH, lat


@dataclass
class AccessSummary:
    """Outcome counts and summed latency (µs) of a batch of accesses."""

    counts: dict = field(default_factory=lambda: {o: 0 for o in Outcome})
    latency_us: float = 0.0

    def add(self, outcome: Outcome, latency_us: float, n: int = 1) -> None:
        self.counts[outcome] += n
        self.latency_us += latency_us


def _batch_access(space: AddressSpace, vpns, is_write: bool, load: float) -> AccessSummary:
    tpl = space.template
    p = space.params
    vpns = np.asarray(vpns, dtype=np.int64)
    out = AccessSummary()
    if vpns.size == 0:
        return out
    uniq, counts = np.unique(vpns, return_counts=True)

    vmas = sorted(list(tpl.vmas) + space.local_vmas, key=lambda v: v.va_start)
    vstart = np.array([v.first_page for v in vmas], dtype=np.int64)
    vend = np.array([v.first_page + v.npages for v in vmas], dtype=np.int64)
    vi = np.searchsorted(vstart, uniq, side="right") - 1
    inside = (vi >= 0) & (uniq < vend[np.maximum(vi, 0)])
    if not inside.all():
        bad = int(uniq[~inside][0])
        raise SegmentationError(f"access to unmapped page {bad * PAGE_SIZE:#x}")
    if is_write:
        writable = np.array([bool(v.prot & Prot.WRITE) for v in vmas])
        if not writable[vi].all():
            bad = int(uniq[~writable[vi]][0])
            raise SegmentationError(f"write to read-only page {bad * PAGE_SIZE:#x}")

    runs = tpl.ptes.runs()
    rstart = np.array([r.first_page for r in runs], dtype=np.int64)
    rend = np.array([r.end_page for r in runs], dtype=np.int64)
    ri = np.searchsorted(rstart, uniq, side="right") - 1
    has_pte = (ri >= 0) & (uniq < rend[np.maximum(ri, 0)]) if runs else np.zeros(uniq.size, bool)
    valid_run = np.array([r.valid for r in runs], dtype=bool)
    valid = has_pte & valid_run[np.maximum(ri, 0)] if runs else has_pte
    private = np.fromiter((int(v) in space.private_pages for v in uniq), bool, uniq.size)

    # reads of in-place pool pages leave no state behind
    direct = ~private & valid & (not is_write)
    if direct.any():
        n = int(counts[direct].sum())
        kinds = {runs[i].pool for i in np.unique(ri[direct])}
        for kind in kinds:
            sel = direct & np.array([runs[i].pool is kind for i in np.maximum(ri, 0)])
            k = int(counts[sel].sum())
            lat = sample_access_latency(tpl.pools[kind], AccessKind.DIRECT_READ, load)
            out.add(Outcome.DIRECT, lat * k, k)
            n -= k
        assert n == 0

    for idx in np.flatnonzero(~direct):
        vpn = int(uniq[idx])
        first_outcome, lat = space.handle_access(vpn, is_write, load)
        out.add(first_outcome, lat)
        rest = int(counts[idx]) - 1
        if rest:
            # repeats hit the page the first access made private
            for _ in range(rest if is_write else 0):
                space.private_pages[vpn].version += 1
            out.add(Outcome.PRIVATE_HIT, 0.0, rest)
    return out


def access_many(space: AddressSpace, vpns, is_write: bool, load: float = 0.0,
                rng: Optional[np.random.Generator] = None) -> AccessSummary:
    """Apply the same access to a batch of pages; equivalent to calling
    :func:`handle_access` once per element, in order."""
    if any(s.latency.jitter_sigma > 0 for s in space.template.pools.values()):
        out = AccessSummary()
        for v in np.asarray(vpns, dtype=np.int64):
            out.add(*space.handle_access(int(v), is_write, load, rng))
        return out
    return _batch_access(space, vpns, is_write, load)


def handle_access(space: AddressSpace, page: int, is_write: bool, load: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> tuple[Outcome, float]:
    return space.handle_access(page, is_write, load, rng)


def mmt_attach(tpl: MmTemplate, process_id: int, params: Optional[FaultModelParams] = None,
               mode: str = "container") -> tuple[AddressSpace, float]:
    """Attach ``tpl`` to a process.  Returns the address space and the attach cost in ms.

    The cost depends only on the sandbox kind, never on the image size.
    """
    if not tpl.is_complete():
        raise IncompleteTemplate(f"template {tpl.id} has VMAs without PTEs")
    params = params or FaultModelParams()
    if mode == "container":
        cost = params.attach_cost_container_ms
    elif mode == "vm":
        cost = params.attach_cost_vm_ms
    else:
        raise ValueError(f"unknown attach mode {mode!r}")
    return AddressSpace(tpl, process_id, params), cost
