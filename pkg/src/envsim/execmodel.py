"""Execution-time cost of remote memory, by page counts or by page-level replay.

One invocation reads ``ceil(read_fraction * pages)`` pages and writes
``ceil(write_fraction * pages)`` pages of its image.  The count model prices
those directly; :func:`replay` drives an attached address space through an
equivalent access trace and must agree with it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mempool import LatencyParams, PoolKind, default_latency
from .mmtemplate import AccessSummary, AddressSpace, FaultModelParams, MmTemplate, access_many
from .units import pages_for
from .workload import FunctionProfile


@dataclass(frozen=True)
class PageCounts:
    pages: int
    read: int
    written: int

    @property
    def touched(self) -> int:
        return self.read + self.written


def page_counts(profile: FunctionProfile) -> PageCounts:
    n = pages_for(profile.image_bytes)
    return PageCounts(n, math.ceil(profile.read_fraction * n), math.ceil(profile.write_fraction * n))


@dataclass(frozen=True)
class MemoryCost:
    overhead_ms: float
    new_local_pages: int
    major_faults: int = 0
    cow_faults: int = 0


def memory_cost(counts: PageCounts, pool: PoolKind, load: float = 0.0, first_run: bool = True,
                fault: Optional[FaultModelParams] = None,
                latency: Optional[LatencyParams] = None) -> MemoryCost:
    """Remote-memory cost of one invocation on a template-restored instance.

    ``first_run`` is False for a warm instance whose touched pages are
    already private from an earlier invocation.
    """
    fault = fault or FaultModelParams()
    pool = PoolKind(pool)
    lat = latency or default_latency(pool)
    if pool is PoolKind.LOCAL:
        return MemoryCost(0.0, 0)
    if pool is PoolKind.CXL:
        # read-only pages are always served in place
        read_us = counts.read * fault.cxl_loads_per_read_page * lat.read_latency_ns / 1000.0
        if not first_run:
            return MemoryCost(read_us / 1000.0, 0)
        cow_us = counts.written * fault.cow_copy_cost_us
        return MemoryCost((read_us + cow_us) / 1000.0, counts.written, 0, counts.written)
    if not first_run:
        return MemoryCost(0.0, 0)
    per_page = lat.fault_handling_us + lat.fetch_latency_us * lat.tail_multiplier(load)
    # a first write to an unfetched page is one major fault that lands the page private
    return MemoryCost(counts.touched * per_page / 1000.0, counts.touched, counts.touched, 0)


@dataclass(frozen=True)
class AccessTrace:
    read_pages: np.ndarray
    write_pages: np.ndarray


def synth_trace(tpl: MmTemplate, profile: FunctionProfile, rng: np.random.Generator) -> AccessTrace:
    """Pick the pages one invocation reads and writes; writes land in writable VMAs."""
    counts = page_counts(profile)
    writable = tpl.writable_pages()
    if counts.written > writable.size:
        raise ValueError(f"{profile.id}: {counts.written} written pages but only "
                         f"{writable.size} writable")
    writes = rng.choice(writable, size=counts.written, replace=False)
    rest = np.setdiff1d(tpl.mapped_pages(), writes, assume_unique=True)
    reads = rng.choice(rest, size=min(counts.read, rest.size), replace=False)
    return AccessTrace(np.sort(reads), np.sort(writes))


def replay(space: AddressSpace, trace: AccessTrace, load: float = 0.0) -> AccessSummary:
    """Run one invocation's accesses: every read page is loaded
    ``cxl_loads_per_read_page`` times, every written page written once."""
    reps = int(round(space.params.cxl_loads_per_read_page))
    reads = np.repeat(trace.read_pages, max(reps, 1))
    total = access_many(space, reads, False, load)
    writes = access_many(space, trace.write_pages, True, load)
    for outcome, n in writes.counts.items():
        total.counts[outcome] += n
    total.latency_us += writes.latency_us
    return total
