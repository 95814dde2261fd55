"""VM-mode extensions: page-cache ledgers, shared browsers and the agent contention model."""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .platform import RestoreParams, criu_copy_cost
from .simcore import CpuModel, Engine, FluidCpu, RngStreams, SimEvent, percentile
from .units import MiB, US_PER_S
from .workload import AgentProfile


class StorageMode(str, enum.Enum):
    BLOCKDEV_BASELINE = "blockdev_baseline"
    PMEM_UNIONFS = "pmem_unionfs"


class FileClass(str, enum.Enum):
    BASE_SHARED = "base_shared"
    WRITABLE_PRIVATE = "writable_private"


class NodeCache:
    """Host page cache for read-only base files, shared by every VM on a node."""

    def __init__(self, base_device_bytes: Optional[int] = None):
        self.base_device_bytes = base_device_bytes
        self.files: dict[str, int] = {}
        self.readers: dict[str, int] = {}

    @property
    def bytes(self) -> int:
        return sum(self.files.values())

    def read(self, file_id: str, nbytes: int) -> int:
        """Cache ``nbytes`` of ``file_id``; returns the growth in bytes."""
        self.readers[file_id] = self.readers.get(file_id, 0) + 1
        have = self.files.get(file_id, 0)
        if nbytes <= have:
            return 0
        self.files[file_id] = nbytes
        return nbytes - have


@dataclass(frozen=True)
class MemoryDelta:
    guest: int = 0
    host: int = 0
    shared: int = 0


_file_ids = itertools.count()


@dataclass
class VmMemoryLedger:
    storage_mode: StorageMode = StorageMode.BLOCKDEV_BASELINE
    writable_direct_io: bool = True
    node_cache: NodeCache = field(default_factory=NodeCache)
    guest_anon_bytes: int = 0
    guest_files: dict = field(default_factory=dict)
    host_files: dict = field(default_factory=dict)

    def __post_init__(self):
        self.storage_mode = StorageMode(self.storage_mode)

    @property
    def guest_page_cache_bytes(self) -> int:
        return sum(self.guest_files.values())

    @property
    def host_page_cache_bytes(self) -> int:
        """Host cache private to this VM (the shared node cache is not included)."""
        return sum(self.host_files.values())

    def footprint(self, sharers: int = 1) -> float:
        """This VM's memory, with the node-wide cache split across ``sharers`` VMs."""
        return (self.guest_anon_bytes + self.guest_page_cache_bytes + self.host_page_cache_bytes
                + self.node_cache.bytes / max(sharers, 1))


def _grow(cache: dict, file_id: str, nbytes: int) -> int:
    have = cache.get(file_id, 0)
    if nbytes <= have:
        return 0
    cache[file_id] = nbytes
    return nbytes - have


def account_file_read(ledger: VmMemoryLedger, file_class, nbytes: int,
                      file_id: Optional[str] = None) -> MemoryDelta:
    """Charge a file read to the caches it lands in and return the growth.

    With a para-virtualized block device the bytes are cached twice, by the
    guest and by the host.  With a shared pmem base device, base files are
    mapped straight from one host copy per node; private writable files use
    direct I/O so only the guest caches them.
    """
    if nbytes <= 0:
        raise ValueError("bytes must be > 0")
    file_class = FileClass(file_class)
    fid = file_id if file_id is not None else f"file{next(_file_ids)}"
    if ledger.storage_mode is StorageMode.BLOCKDEV_BASELINE:
        return MemoryDelta(guest=_grow(ledger.guest_files, fid, nbytes),
                           host=_grow(ledger.host_files, fid, nbytes))
    if file_class is FileClass.BASE_SHARED:
        return MemoryDelta(shared=ledger.node_cache.read(fid, nbytes))
    guest = _grow(ledger.guest_files, fid, nbytes)
    host = 0 if ledger.writable_direct_io else _grow(ledger.host_files, fid, nbytes)
    return MemoryDelta(guest=guest, host=host)


def agent_peak_memory(agent: AgentProfile, mode, n_vms: int = 50) -> float:
    """Per-agent peak memory (MB) when ``n_vms`` copies of ``agent`` share a node.

    The profiled footprint already contains the guest's cache of the base
    files the agent reads; guest OS overhead is left out of the comparison.
    """
    mode = StorageMode(mode)
    node = NodeCache()
    base = int(agent.base_file_read_mb * MiB)
    ledgers = []
    for _ in range(n_vms):
        led = VmMemoryLedger(mode, node_cache=node,
                             guest_anon_bytes=int(agent.memory_mb * MiB) - base)
        if base:
            account_file_read(led, FileClass.BASE_SHARED, base, file_id=f"base/{agent.id}")
        ledgers.append(led)
    return float(np.mean([led.footprint(n_vms) for led in ledgers])) / MiB


def vanilla_vm_restore_ms(image_bytes: float, vma_count: int = 0, floor_ms: float = 700.0,
                          params: Optional[RestoreParams] = None) -> float:
    """Full-copy snapshot restore of a VM through an unmodified hypervisor."""
    return max(floor_ms, criu_copy_cost(image_bytes, vma_count, params))


@dataclass
class BrowserGroup:
    group_id: int
    capacity: int = 10
    members: list = field(default_factory=list)
    browser_cpu_demand: float = 1.0
    browser_memory_mb: float = 700.0

    @property
    def full(self) -> bool:
        return len(self.members) >= self.capacity


def assign_browser(agent: AgentProfile, groups: list, member_id=None, capacity: int = 10,
                   browser_memory_mb: float = 700.0) -> BrowserGroup:
    """Put an agent into the first group with a free tab slot, opening a new
    browser when every group is full."""
    if not agent.browser_required:
        raise ValueError(f"{agent.id} does not use a browser")
    if capacity < 1:
        raise ConfigError("browser capacity must be >= 1")
    member = member_id if member_id is not None else agent.id
    for g in groups:
        if not g.full:
            g.members.append(member)
            return g
    g = BrowserGroup(len(groups), capacity, [member], agent.spike_demand, browser_memory_mb)
    groups.append(g)
    return g


def browser_memory_mb(groups: Sequence[BrowserGroup]) -> float:
    return sum(g.browser_memory_mb for g in groups)


@dataclass
class AgentSimParams:
    cores: int = 20
    gamma: float = 1.85
    segments: int = 8
    wait_sigma: float = 0.2
    browser_capacity: Optional[int] = None  # None: every agent runs its own browser
    browser_memory_mb: float = 700.0


@dataclass
class AgentRunResult:
    e2e_s: dict  # agent kind -> list of end-to-end seconds
    browser_groups: int
    browser_memory_mb: float

    def mean(self, kind: str) -> float:
        return float(np.mean(self.e2e_s[kind]))

    def p99(self, kind: str) -> float:
        return percentile(self.e2e_s[kind], 99)


def simulate_agents(mix: Sequence[tuple], params: Optional[AgentSimParams] = None,
                    seed: int = 0) -> AgentRunResult:
    """Run concurrent agents on a shared CPU until all finish.

    ``mix`` is a sequence of (AgentProfile, count).  Each agent alternates
    LLM waits (pure delay) with CPU steps that share the cores through a
    processor-sharing model.  With browser sharing, the shareable part of
    each CPU step is done once per group rather than once per agent.
    """
    p = params or AgentSimParams()
    rngs = RngStreams(seed)
    trace_rng = rngs.get("agent_traces")
    engine = Engine()
    cpu = FluidCpu(CpuModel(p.cores, p.gamma))
    groups: list = []
    agents = []  # [profile, segments, next segment, group member key]
    for prof, count in mix:
        for i in range(count):
            key = (prof.id, i)
            if prof.browser_required:
                if p.browser_capacity:
                    assign_browser(prof, groups, key, p.browser_capacity, p.browser_memory_mb)
                else:
                    groups.append(BrowserGroup(len(groups), 1, [key], prof.spike_demand,
                                               p.browser_memory_mb))
            agents.append([prof, prof.phase_trace(trace_rng, p.segments, p.wait_sigma), 0, key])
    group_size = {m: len(g.members) for g in groups for m in g.members}
    for a in agents:
        prof, key = a[0], a[3]
        phi = prof.shareable_fraction if key in group_size else 0.0
        # the shared part of a browser step is done once per group
        a.append(1.0 - phi + phi / group_size.get(key, 1))

    finish: dict = {}
    state = {"version": 0}

    def reschedule():
        state["version"] += 1
        nxt = cpu.next_completion()
        if nxt is not None:
            engine.schedule(max(nxt[0], engine.now), "cpu_done", (state["version"], nxt[1]))

    def start_segment(idx: int):
        prof, segs, pos, _, factor = agents[idx]
        if pos >= len(segs):
            finish[idx] = engine.now
            return
        seg = segs[pos]
        agents[idx][2] = pos + 1
        if seg.kind == "llm_wait":
            engine.schedule(engine.now + seg.duration_s * US_PER_S, "wait_done", idx)
        else:
            cpu.advance(engine.now)
            cpu.add(idx, seg.duration_s * factor * US_PER_S, prof.spike_demand)
            reschedule()

    def on_wait_done(ev: SimEvent):
        start_segment(ev.payload)

    def on_cpu_done(ev: SimEvent):
        version, idx = ev.payload
        if version != state["version"]:
            return
        cpu.advance(engine.now)
        cpu.remove(idx)
        reschedule()
        start_segment(idx)

    engine.on("wait_done", on_wait_done)
    engine.on("cpu_done", on_cpu_done)
    for idx in range(len(agents)):
        start_segment(idx)
    engine.run()

    e2e: dict = {}
    for idx, a in enumerate(agents):
        e2e.setdefault(a[0].id, []).append(finish[idx] / US_PER_S)
    return AgentRunResult(e2e, len(groups), browser_memory_mb(groups))
