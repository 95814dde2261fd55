"""Serverless control plane: restore policies, keep-alive pool, sandbox pool, event loop."""
from __future__ import annotations

import collections
import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, UnknownFunction
from .execmodel import memory_cost, page_counts
from .mempool import PoolKind, PoolStore
from .mmtemplate import FaultModelParams
from .sandbox import (CleanParams, ColdCostRanges, OverlayPool, RepurposeParams, Sandbox,
                      SandboxKind, SandboxState, clean, create_cold, finish_clean, repurpose)
from .simcore import Engine, FluidCpu, LinearContention, RngStreams, SimEvent, cpu_slowdown
from .snapshot import SharingSpec, build_snapshot, build_template
from .units import GiB, MiB, PAGE_SIZE, US_PER_MS, US_PER_S
from .workload import Catalog, FunctionProfile, InvocationTrace


class RestorePolicy(str, enum.Enum):
    COLD = "COLD"
    CRIU_COPY = "CRIU_COPY"
    LAZY_RESTORE_REAP = "LAZY_RESTORE_REAP"
    LAZY_RESTORE_FAASNAP = "LAZY_RESTORE_FAASNAP"
    TRENV = "TRENV"


LAZY_POLICIES = (RestorePolicy.LAZY_RESTORE_REAP, RestorePolicy.LAZY_RESTORE_FAASNAP)

_ALIASES = {
    "COLD": (RestorePolicy.COLD, PoolKind.LOCAL),
    "CRIU": (RestorePolicy.CRIU_COPY, PoolKind.LOCAL),
    "CRIU_COPY": (RestorePolicy.CRIU_COPY, PoolKind.LOCAL),
    "REAP": (RestorePolicy.LAZY_RESTORE_REAP, PoolKind.LOCAL),
    "LAZY_RESTORE_REAP": (RestorePolicy.LAZY_RESTORE_REAP, PoolKind.LOCAL),
    "FAASNAP": (RestorePolicy.LAZY_RESTORE_FAASNAP, PoolKind.LOCAL),
    "LAZY_RESTORE_FAASNAP": (RestorePolicy.LAZY_RESTORE_FAASNAP, PoolKind.LOCAL),
    "TRENV-CXL": (RestorePolicy.TRENV, PoolKind.CXL),
    "T-CXL": (RestorePolicy.TRENV, PoolKind.CXL),
    "TRENV-RDMA": (RestorePolicy.TRENV, PoolKind.RDMA),
    "T-RDMA": (RestorePolicy.TRENV, PoolKind.RDMA),
}


@dataclass(frozen=True)
class Policy:
    kind: RestorePolicy
    pool: PoolKind = PoolKind.LOCAL
    sandbox_kind: SandboxKind = SandboxKind.CONTAINER

    def __post_init__(self):
        object.__setattr__(self, "kind", RestorePolicy(self.kind))
        object.__setattr__(self, "pool", PoolKind(self.pool))
        object.__setattr__(self, "sandbox_kind", SandboxKind(self.sandbox_kind))
        if self.kind in LAZY_POLICIES and self.sandbox_kind is not SandboxKind.VM:
            raise ConfigError(f"{self.kind.value} restores microVMs; sandbox_kind must be 'vm'")
        if self.kind is RestorePolicy.TRENV and self.pool is PoolKind.LOCAL:
            raise ConfigError("TRENV needs a CXL or RDMA pool")
        if self.kind is not RestorePolicy.TRENV and self.pool is not PoolKind.LOCAL:
            raise ConfigError(f"{self.kind.value} restores from local storage only")

    @classmethod
    def parse(cls, name: str, sandbox_kind: Optional[str] = None) -> "Policy":
        try:
            kind, pool = _ALIASES[name.upper()]
        except KeyError:
            raise ConfigError(f"unknown policy {name!r}; choose from {sorted(_ALIASES)}") from None
        if sandbox_kind is None:
            sandbox_kind = SandboxKind.VM if kind in LAZY_POLICIES else SandboxKind.CONTAINER
        return cls(kind, pool, SandboxKind(sandbox_kind))

    @property
    def label(self) -> str:
        if self.kind is RestorePolicy.TRENV:
            return f"TRENV-{self.pool.value}"
        return self.kind.value


@dataclass
class RestoreParams:
    criu_intercept_ms: float = 28.0
    criu_ms_per_mib: float = 160.0 / 300.0
    layout_us_per_vma: float = 20.0
    # per-process restore work slows with concurrent starts (CPU contention)
    cpu_concurrency_slope: float = 0.06

    def cpu_scale(self, concurrent: int) -> float:
        return 1.0 + self.cpu_concurrency_slope * (max(concurrent, 1) - 1)


def criu_copy_cost(image_bytes: float, vma_count: int = 0, params: Optional[RestoreParams] = None) -> float:
    """Copy-restore time (ms): a fixed intercept, a per-MiB copy term and a
    per-VMA layout rebuild term."""
    p = params or RestoreParams()
    if image_bytes < 0:
        raise ValueError("image_bytes must be >= 0")
    return (p.criu_intercept_ms + p.criu_ms_per_mib * image_bytes / MiB
            + p.layout_us_per_vma * vma_count / 1000.0)


@dataclass
class LazyParams:
    vm_spawn_ms: float = 10.0
    snapshot_load_ms: float = 5.0
    uffd_fault_us: float = 4.0
    reap_prefetch_us_per_page: float = 8.0
    faasnap_prefetch_fraction: float = 0.7


@dataclass
class Optimizations:
    sandbox_reuse: bool = True
    cgroup_clone: bool = True
    mm_template: bool = True


@dataclass
class PlatformParams:
    keep_alive_s: float = 600.0
    memory_cap_bytes: Optional[int] = None
    cores: int = 64
    rdma_capacity: int = 32  # concurrent fault streams before the fabric saturates
    sandbox_overhead_bytes: int = 2 * MiB
    guest_os_bytes: int = 150 * MiB
    pool_capacity_bytes: int = 256 * GiB
    mem_sample_s: float = 1.0
    warmup_s: float = 0.0
    cold: ColdCostRanges = field(default_factory=ColdCostRanges)
    repurpose: RepurposeParams = field(default_factory=RepurposeParams)
    clean: CleanParams = field(default_factory=CleanParams)
    fault: FaultModelParams = field(default_factory=FaultModelParams)
    restore: RestoreParams = field(default_factory=RestoreParams)
    lazy: LazyParams = field(default_factory=LazyParams)
    optimizations: Optimizations = field(default_factory=Optimizations)
    sharing: SharingSpec = field(default_factory=SharingSpec)

    def __post_init__(self):
        if self.keep_alive_s < 0 or self.cores < 1 or self.rdma_capacity < 1:
            raise ConfigError("keep_alive_s >= 0, cores >= 1 and rdma_capacity >= 1 required")
        if self.mem_sample_s <= 0:
            raise ConfigError("mem_sample_s must be > 0")


_instance_ids = itertools.count(1)


@dataclass
class Instance:
    id: int
    function_id: str
    sandbox: Sandbox
    local_bytes: int
    template_backed: bool = False
    lazy: bool = False
    runs: int = 0
    last_used_us: float = 0.0
    expiry_us: float = 0.0
    token: int = 0


class InstancePool:
    """Idle kept-alive instances, least recently used first."""

    def __init__(self, keep_alive_s: float = 600.0, memory_cap_bytes: Optional[int] = None):
        self.keep_alive_s = keep_alive_s
        self.memory_cap_bytes = memory_cap_bytes
        self.entries: "collections.OrderedDict[int, Instance]" = collections.OrderedDict()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.values())

    def add(self, inst: Instance, now_us: float) -> None:
        inst.last_used_us = now_us
        inst.expiry_us = now_us + self.keep_alive_s * US_PER_S
        inst.token += 1
        self.entries[inst.id] = inst
        self.entries.move_to_end(inst.id)

    def take(self, function_id: str) -> Optional[Instance]:
        """Most recently used idle instance of ``function_id``, removed from the pool."""
        for inst in reversed(self.entries.values()):
            if inst.function_id == function_id:
                del self.entries[inst.id]
                return inst
        return None

    def remove(self, inst: Instance) -> None:
        self.entries.pop(inst.id, None)

    @property
    def idle_bytes(self) -> int:
        return sum(i.local_bytes for i in self.entries.values())


def evict(pool: InstancePool, now_us: float, needed_bytes: int,
          on_evict: Optional[Callable[[Instance], None]] = None) -> int:
    """Drop expired instances, then least recently used ones until
    ``needed_bytes`` are freed.  Returns the bytes freed."""
    freed = 0
    for inst in [i for i in pool if i.expiry_us <= now_us]:
        pool.remove(inst)
        freed += inst.local_bytes
        if on_evict:
            on_evict(inst)
    while freed < needed_bytes and len(pool):
        inst = next(iter(pool))
        pool.remove(inst)
        freed += inst.local_bytes
        if on_evict:
            on_evict(inst)
    return freed


@dataclass
class Invocation:
    index: int
    function_id: str
    arrival_us: float
    path: str = ""
    breakdown: dict = field(default_factory=dict)
    startup_ms: float = 0.0
    exec_ms: float = 0.0
    mem_overhead_ms: float = 0.0
    major_faults: int = 0
    cow_faults: int = 0
    instance: Optional[Instance] = None
    ready_us: float = 0.0


@dataclass
class SimResult:
    policy: str
    records: list
    memory: list
    counters: dict
    pool_bytes: int
    template_metadata: dict


class Platform:
    """Event-driven node: serves an invocation trace under one restore policy."""

    def __init__(self, catalog: Catalog, policy: Policy, params: Optional[PlatformParams] = None,
                 seed: int = 0, functions: Optional[list] = None):
        self.catalog = catalog
        self.policy = policy
        self.p = params or PlatformParams()
        self.rng = RngStreams(seed)
        self.engine = Engine()
        self.functions = list(functions) if functions is not None else sorted(catalog.functions)
        for fid in self.functions:
            catalog.function(fid)
        self.counts = {fid: page_counts(catalog.function(fid)) for fid in self.functions}

        self.idle = InstancePool(self.p.keep_alive_s, self.p.memory_cap_bytes)
        self.pooled: collections.deque = collections.deque()
        self.cleaning = 0
        self.waiters: collections.deque = collections.deque()
        self.netns_pool = 0
        self.overlays = OverlayPool()
        for fid in self.functions:
            self.overlays.prepare(fid)
        self.sandboxes: list[Sandbox] = []
        self.starting = 0
        self.running = 0
        self.rdma_active = 0
        self.live: dict[int, Instance] = {}
        self.records: list = []
        self.memory: list = []
        self.counters = collections.Counter()
        self._sb_ids = itertools.count(1)
        self._exec_z = np.empty(0)
        self._horizon_us = 0.0
        self._next_index = 0
        # sandbox creations in flight share the host's setup capacity
        self.setup_cpu = FluidCpu(LinearContention(self.p.cold.concurrency_slope))
        self._setup_jobs: dict = {}
        self._setup_ids = itertools.count()
        self._setup_version = 0

        self.pools: dict = {}
        self.templates: dict = {}
        if policy.kind is RestorePolicy.TRENV:
            store = PoolStore(policy.pool, self.p.pool_capacity_bytes)
            self.pools[policy.pool] = store
            srng = self.rng.get("snapshot")
            for fid in self.functions:
                img = build_snapshot(catalog.function(fid), self.p.sharing, srng)
                self.templates[fid] = build_template(img, self.pools, policy.pool)

        e = self.engine
        e.on("arrival", self._on_arrival)
        e.on("start_done", self._on_start_done)
        e.on("exec_done", self._on_exec_done)
        e.on("expire", self._on_expire)
        e.on("purge_done", self._on_purge_done)
        e.on("mem_sample", self._on_mem_sample)
        e.on("setup_done", self._on_setup_done)

    # ---- memory -------------------------------------------------------
    @property
    def private_bytes(self) -> int:
        return sum(i.local_bytes for i in self.live.values())

    @property
    def sandbox_bytes(self) -> int:
        n = sum(1 for s in self.sandboxes if s.state is not SandboxState.DESTROYED)
        return n * self.p.sandbox_overhead_bytes

    @property
    def guest_bytes(self) -> int:
        if self.policy.sandbox_kind is not SandboxKind.VM:
            return 0
        return sum(1 for s in self.sandboxes if s.state is not SandboxState.DESTROYED) * self.p.guest_os_bytes

    @property
    def local_bytes(self) -> int:
        return self.private_bytes + self.sandbox_bytes + self.guest_bytes

    @property
    def pool_bytes(self) -> int:
        return sum(s.used_bytes for s in self.pools.values())

    def _enforce_cap(self) -> None:
        cap = self.p.memory_cap_bytes
        if cap is None:
            return
        over = self.local_bytes - cap
        if over > 0:
            evict(self.idle, self.engine.now, over, self._retire)

    # ---- instance lifecycle -------------------------------------------
    def _retire(self, inst: Instance) -> None:
        """Tear down an evicted idle instance."""
        self.live.pop(inst.id, None)
        self.counters["evictions"] += 1
        sb = inst.sandbox
        if self.policy.kind is RestorePolicy.TRENV and self.p.optimizations.sandbox_reuse:
            purge_ms = clean(sb, self.p.clean)
            self.cleaning += 1
            self.engine.schedule(self.engine.now + purge_ms * US_PER_MS, "purge_done", sb)
        else:
            sb.destroy()
            if self.policy.kind in LAZY_POLICIES:
                self.netns_pool += 1

    def _on_expire(self, ev: SimEvent) -> None:
        inst, token = ev.payload
        if inst.id in self.idle.entries and inst.token == token:
            self.idle.remove(inst)
            self._retire(inst)

    def _on_purge_done(self, ev: SimEvent) -> None:
        sb: Sandbox = ev.payload
        finish_clean(sb, self.overlays)
        self.cleaning -= 1
        if self.waiters:
            inv = self.waiters.popleft()
            self._start_repurpose(inv, sb, waited_ms=(self.engine.now - inv.arrival_us) / US_PER_MS)
        else:
            self.pooled.append(sb)

    # ---- startup paths ------------------------------------------------
    def _concurrent(self) -> int:
        """Startups in flight, counting the one about to begin."""
        return self.starting + len(self._setup_jobs) + 1

    def _new_sandbox(self, fid: str, prof: FunctionProfile, kind: SandboxKind):
        """Uncontended creation costs; contention is applied while the setup runs."""
        sb, _, bd = create_cold(kind, fid, 1, self.rng.get("sandbox"), self.p.cold,
                                threads=prof.threads, sandbox_id=next(self._sb_ids))
        self.sandboxes.append(sb)
        return sb, bd

    def _setup(self, parts: dict, done: Callable[[dict, float], None]) -> None:
        """Run a sandbox creation on the shared setup resource, then call
        ``done(stretched breakdown, elapsed ms)``."""
        now = self.engine.now
        self.setup_cpu.advance(now)
        key = next(self._setup_ids)
        self._setup_jobs[key] = (parts, done, now)
        self.setup_cpu.add(key, sum(parts.values()) * US_PER_MS, 1.0)
        self._reschedule_setup()

    def _reschedule_setup(self) -> None:
        self._setup_version += 1
        nxt = self.setup_cpu.next_completion()
        if nxt is not None:
            t, key = nxt
            self.engine.schedule(max(t, self.engine.now), "setup_done", (self._setup_version, key))

    def _on_setup_done(self, ev: SimEvent) -> None:
        version, key = ev.payload
        if version != self._setup_version:
            return
        now = self.engine.now
        self.setup_cpu.advance(now)
        self.setup_cpu.remove(key)
        parts, done, t0 = self._setup_jobs.pop(key)
        self._reschedule_setup()
        elapsed = (now - t0) / US_PER_MS
        total = sum(parts.values())
        stretch = elapsed / total if total > 0 else 1.0
        done({k: v * stretch for k, v in parts.items()}, elapsed)

    def _restore_parts(self, prof: FunctionProfile, n: int, template: bool) -> dict:
        r = self.p.restore
        scale = r.cpu_scale(n)
        rng = self.rng.get("restore")
        parts = {"process_other": self.p.cold.process_other(prof.threads, rng) * scale}
        if template:
            fault = self.p.fault
            attach = fault.attach_cost_vm_ms if self.policy.sandbox_kind is SandboxKind.VM \
                else fault.attach_cost_container_ms
            parts["mmt_attach"] = attach * scale
        else:
            parts["memory_copy"] = criu_copy_cost(prof.image_bytes * prof.anon_fraction, 0, r) * scale
            parts["mmap_layout"] = r.layout_us_per_vma * prof.vma_count / 1000.0 * scale
        return parts

    def _launch(self, inv: Invocation, inst: Instance, path: str, breakdown: dict,
                elapsed_ms: float = 0.0) -> None:
        """Start the instance; ``elapsed_ms`` of the breakdown has already passed."""
        inv.path = path
        inv.breakdown = breakdown
        inv.startup_ms = sum(breakdown.values())
        inv.instance = inst
        self.live[inst.id] = inst
        self.starting += 1
        self.counters[f"path_{path}"] += 1
        remaining = max(inv.startup_ms - elapsed_ms, 0.0)
        self.engine.schedule(self.engine.now + remaining * US_PER_MS, "start_done", inv)
        self._enforce_cap()

    def _start_repurpose(self, inv: Invocation, sb: Sandbox, waited_ms: float = 0.0) -> None:
        prof = self.catalog.function(inv.function_id)
        n = self._concurrent()
        rp = replace(self.p.repurpose, cgroup_clone=self.p.optimizations.cgroup_clone)
        _, bd = repurpose(sb, inv.function_id, self.rng.get("repurpose"), rp, self.overlays,
                          self.p.cold, prof.threads)
        scale = self.p.restore.cpu_scale(n)
        bd = {k: v * scale for k, v in bd.items()}
        if waited_ms > 0:
            bd = {"wait_for_purge": waited_ms, **bd}
        tpl_on = self.p.optimizations.mm_template
        bd.update(self._restore_parts(prof, n, template=tpl_on))
        if tpl_on:
            local = self.templates[inv.function_id].metadata_bytes
        else:
            local = prof.image_bytes
        inst = Instance(next(_instance_ids), inv.function_id, sb, local, template_backed=tpl_on)
        self._launch(inv, inst, "repurposed", bd)

    def _start_copy_restore(self, inv: Invocation, prof: FunctionProfile, template: bool = False) -> None:
        """New sandbox, then either a full memory copy or a template attach."""
        n = self._concurrent()
        sb, parts = self._new_sandbox(inv.function_id, prof, self.policy.sandbox_kind)
        restore = self._restore_parts(prof, n, template=template)
        local = self.templates[inv.function_id].metadata_bytes if template else prof.image_bytes

        def done(bd: dict, elapsed: float) -> None:
            inst = Instance(next(_instance_ids), inv.function_id, sb, local, template_backed=template)
            self._launch(inv, inst, "restored", {**bd, **restore}, elapsed)

        self._setup(parts, done)

    def _start_cold(self, inv: Invocation, prof: FunctionProfile) -> None:
        n = self._concurrent()
        sb, parts = self._new_sandbox(inv.function_id, prof, self.policy.sandbox_kind)
        boot = {"bootstrap": prof.bootstrap_ms * self.p.restore.cpu_scale(n)}

        def done(bd: dict, elapsed: float) -> None:
            inst = Instance(next(_instance_ids), inv.function_id, sb, prof.image_bytes)
            self._launch(inv, inst, "cold", {**bd, **boot}, elapsed)

        self._setup(parts, done)

    def _start_lazy(self, inv: Invocation, prof: FunctionProfile) -> None:
        n = self._concurrent()
        sb, parts = self._new_sandbox(inv.function_id, prof, SandboxKind.VM)
        if self.netns_pool > 0:
            self.netns_pool -= 1
            parts.pop("network")
        lz = self.p.lazy
        scale = self.p.restore.cpu_scale(n)
        parts["hypervisor"] = parts.get("hypervisor", 0.0) + lz.vm_spawn_ms
        restore = {"snapshot_load": lz.snapshot_load_ms * scale}
        counts = self.counts[inv.function_id]
        if self.policy.kind is RestorePolicy.LAZY_RESTORE_REAP:
            restore["working_set_prefetch"] = counts.touched * lz.reap_prefetch_us_per_page / 1000.0 * scale

        def done(bd: dict, elapsed: float) -> None:
            inst = Instance(next(_instance_ids), inv.function_id, sb, counts.touched * PAGE_SIZE, lazy=True)
            self._launch(inv, inst, "restored", {**bd, **restore}, elapsed)

        self._setup(parts, done)

    # ---- event handlers -----------------------------------------------
    def _on_arrival(self, ev: SimEvent) -> None:
        inv: Invocation = ev.payload
        prof = self.catalog.function(inv.function_id)
        inst = self.idle.take(inv.function_id)
        if inst is not None:
            inv.path, inv.instance = "warm", inst
            self.counters["path_warm"] += 1
            self.starting += 1
            self.engine.schedule(self.engine.now, "start_done", inv)
            return
        kind = self.policy.kind
        if kind is RestorePolicy.TRENV and self.p.optimizations.sandbox_reuse:
            if self.pooled:
                self._start_repurpose(inv, self.pooled.popleft())
                return
            if self.cleaning > len(self.waiters):
                self.waiters.append(inv)
                self.counters["waited_for_purge"] += 1
                return
            self._start_copy_restore(inv, prof, template=self.p.optimizations.mm_template)
        elif kind is RestorePolicy.TRENV:
            self._start_copy_restore(inv, prof, template=self.p.optimizations.mm_template)
        elif kind is RestorePolicy.CRIU_COPY:
            self._start_copy_restore(inv, prof)
        elif kind is RestorePolicy.COLD:
            self._start_cold(inv, prof)
        else:
            self._start_lazy(inv, prof)

    def _on_start_done(self, ev: SimEvent) -> None:
        inv: Invocation = ev.payload
        self.starting -= 1
        inst = inv.instance
        prof = self.catalog.function(inv.function_id)
        counts = self.counts[inv.function_id]
        self.running += 1
        inst.sandbox.run_instance(f"inv{inv.index}")

        rdma = inst.template_backed and self.policy.pool is PoolKind.RDMA
        if rdma:
            self.rdma_active += 1
        base = self._exec_base(inv, prof)
        slow = cpu_slowdown(self.running, self.p.cores)
        overhead, new_pages = 0.0, 0
        if inst.template_backed:
            load = min(1.0, self.rdma_active / self.p.rdma_capacity)
            mc = memory_cost(counts, self.policy.pool, load, first_run=inst.runs == 0,
                             fault=self.p.fault, latency=self.pools[self.policy.pool].latency)
            overhead, new_pages = mc.overhead_ms, mc.new_local_pages
            inv.major_faults, inv.cow_faults = mc.major_faults, mc.cow_faults
        elif inst.lazy:
            lz = self.p.lazy
            faulting = counts.touched
            if self.policy.kind is RestorePolicy.LAZY_RESTORE_FAASNAP:
                faulting = int(round(counts.touched * (1.0 - lz.faasnap_prefetch_fraction)))
            if inst.runs == 0:
                overhead = faulting * lz.uffd_fault_us / 1000.0
                inv.major_faults = faulting
        inv.mem_overhead_ms = overhead
        inv.exec_ms = base * slow + overhead
        inst.local_bytes += new_pages * PAGE_SIZE
        inst.runs += 1
        self.counters["major_faults"] += inv.major_faults
        self.counters["cow_faults"] += inv.cow_faults
        if new_pages:
            self._enforce_cap()
        inv.ready_us = self.engine.now
        self.engine.schedule(self.engine.now + inv.exec_ms * US_PER_MS, "exec_done", (inv, rdma))

    def _exec_base(self, inv: Invocation, prof: FunctionProfile) -> float:
        # noise is keyed by invocation index so arms of a comparison draw alike
        if inv.index < len(self._exec_z):
            z = float(self._exec_z[inv.index])
        else:
            z = float(self.rng.get("exec_extra").standard_normal())
        return prof.base_exec_ms * float(np.exp(prof.exec_sigma * z))

    def _on_exec_done(self, ev: SimEvent) -> None:
        inv, rdma = ev.payload
        self.running -= 1
        if rdma:
            self.rdma_active -= 1
        inst = inv.instance
        self.idle.add(inst, self.engine.now)
        self.engine.schedule(inst.expiry_us, "expire", (inst, inst.token))
        e2e = (self.engine.now - inv.arrival_us) / US_PER_MS
        self.records.append({
            "type": "invocation",
            "index": inv.index,
            "function_id": inv.function_id,
            "arrival_ms": inv.arrival_us / US_PER_MS,
            "path": inv.path,
            "startup_ms": inv.startup_ms,
            "breakdown": dict(inv.breakdown),
            "exec_ms": inv.exec_ms,
            "mem_overhead_ms": inv.mem_overhead_ms,
            "e2e_ms": e2e,
            "major_faults": inv.major_faults,
            "cow_faults": inv.cow_faults,
            "warmup": inv.arrival_us < self.p.warmup_s * US_PER_S,
        })
        self._enforce_cap()

    def _sample_memory(self) -> dict:
        return {
            "type": "memory",
            "time_ms": self.engine.now / US_PER_MS,
            "private_bytes": self.private_bytes,
            "sandbox_bytes": self.sandbox_bytes,
            "guest_os_bytes": self.guest_bytes,
            "page_cache_bytes": 0,
            "local_bytes": self.local_bytes,
            "pool_bytes": self.pool_bytes,
            "warmup": self.engine.now < self.p.warmup_s * US_PER_S,
        }

    def _on_mem_sample(self, ev: SimEvent) -> None:
        self.memory.append(self._sample_memory())
        nxt = self.engine.now + self.p.mem_sample_s * US_PER_S
        if nxt <= self._horizon_us:
            self.engine.schedule(nxt, "mem_sample")

    def run(self, trace: InvocationTrace) -> SimResult:
        for fid in set(trace.function_ids):
            if fid not in self.counts:
                raise UnknownFunction(fid)
        self._horizon_us = trace.arrivals_us[-1] if len(trace) else 0.0
        self._exec_z = self.rng.get("exec").standard_normal(self._next_index + len(trace))
        self.engine.schedule(0.0, "mem_sample")
        base = self._next_index
        for i, (fid, t) in enumerate(trace):
            self.engine.schedule(t, "arrival", Invocation(base + i, fid, t))
        self._next_index += len(trace)
        self.engine.run()
        self.memory.append(self._sample_memory())
        self.records.sort(key=lambda r: r["index"])
        return SimResult(
            policy=self.policy.label,
            records=self.records,
            memory=self.memory,
            counters=dict(sorted(self.counters.items())),
            pool_bytes=self.pool_bytes,
            template_metadata={f: t.metadata_bytes for f, t in sorted(self.templates.items())},
        )


def on_invocation(platform: Platform, function_id: str, arrival_us: float) -> dict:
    """Serve a single invocation on ``platform`` and return its record."""
    platform.catalog.function(function_id)
    if function_id not in platform.counts:
        raise UnknownFunction(function_id)
    idx = platform._next_index
    platform._next_index += 1
    platform.engine.schedule(arrival_us, "arrival", Invocation(idx, function_id, arrival_us))
    while len(platform.engine):
        for rec in reversed(platform.records):
            if rec["index"] == idx:
                return rec
        platform.engine.run(until=platform.engine.peek_time())
    for rec in reversed(platform.records):
        if rec["index"] == idx:
            return rec
    raise RuntimeError(f"invocation {idx} never completed")


def optimization_breakdown(profile: FunctionProfile, params: Optional[PlatformParams] = None,
                           samples: int = 4000, seed: int = 0) -> dict:
    """Mean startup (ms) as optimizations are switched on one at a time, at
    concurrency 1, plus the remote-memory execution overhead per pool."""
    p = params or PlatformParams()
    rng = np.random.default_rng(seed)
    r, cold = p.restore, p.cold
    stages = {"baseline": [], "sandbox_reuse": [], "cgroup_clone": [], "mm_template": []}
    rp_migrate = replace(p.repurpose, cgroup_clone=False)
    rp_clone = replace(p.repurpose, cgroup_clone=True)
    attach = p.fault.attach_cost_container_ms
    copy = criu_copy_cost(profile.image_bytes * profile.anon_fraction, 0, r)
    layout = r.layout_us_per_vma * profile.vma_count / 1000.0
    for _ in range(samples):
        _, sb_ms, _ = create_cold("container", profile.id, 1, rng, cold, threads=profile.threads)
        proc = cold.process_other(profile.threads, rng)
        stages["baseline"].append(sb_ms + copy + layout + proc)
        pooled = Sandbox(0, SandboxKind.CONTAINER, state=SandboxState.POOLED)
        rep_m, _ = repurpose(pooled, profile.id, rng, rp_migrate, None, cold, profile.threads)
        stages["sandbox_reuse"].append(rep_m + copy + layout + proc)
        pooled = Sandbox(0, SandboxKind.CONTAINER, state=SandboxState.POOLED)
        rep_c, _ = repurpose(pooled, profile.id, rng, rp_clone, None, cold, profile.threads)
        stages["cgroup_clone"].append(rep_c + copy + layout + proc)
        stages["mm_template"].append(rep_c + attach + proc)
    mean = {k: float(np.mean(v)) for k, v in stages.items()}
    counts = page_counts(profile)
    return {
        "startup_ms": mean,
        "savings_ms": {
            "sandbox_reuse": mean["baseline"] - mean["sandbox_reuse"],
            "cgroup_clone": mean["sandbox_reuse"] - mean["cgroup_clone"],
            "mm_template": mean["cgroup_clone"] - mean["mm_template"],
        },
        "exec_overhead_ms": {
            "CXL": memory_cost(counts, PoolKind.CXL, 0.0, fault=p.fault).overhead_ms,
            "RDMA": memory_cost(counts, PoolKind.RDMA, 0.0, fault=p.fault).overhead_ms,
        },
    }
