"""Sandbox components, lifecycle, cold-creation costs, cleaning and repurposing."""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, EnvSimError


class InvalidState(EnvSimError):
    pass


class SandboxState(str, enum.Enum):
    CREATING = "CREATING"
    ACTIVE = "ACTIVE"
    CLEANING = "CLEANING"
    POOLED = "POOLED"
    DESTROYED = "DESTROYED"


class SandboxKind(str, enum.Enum):
    CONTAINER = "container"
    VM = "vm"


_TRANSITIONS = {
    SandboxState.CREATING: {SandboxState.ACTIVE},
    SandboxState.ACTIVE: {SandboxState.CLEANING},
    SandboxState.CLEANING: {SandboxState.POOLED},
    SandboxState.POOLED: {SandboxState.ACTIVE},
    SandboxState.DESTROYED: set(),
}


def transition_allowed(src: SandboxState, dst: SandboxState) -> bool:
    if dst is SandboxState.DESTROYED:
        return src is not SandboxState.DESTROYED
    return dst in _TRANSITIONS[src]


@dataclass
class NetNs:
    configured: bool = False
    reusable: bool = True
    connections: dict = field(default_factory=dict)  # conn id -> owner instance


@dataclass
class Rootfs:
    base_overlay_id: str = "base"
    function_overlay_id: Optional[str] = None
    upper_files: dict = field(default_factory=dict)  # path -> owner instance

    @property
    def upper_dirty(self) -> bool:
        return bool(self.upper_files)


@dataclass
class Cgroup:
    exists: bool = False
    limits: dict = field(default_factory=dict)
    procs: dict = field(default_factory=dict)  # pid -> owner instance


@dataclass
class SandboxComponents:
    netns: NetNs = field(default_factory=NetNs)
    rootfs: Rootfs = field(default_factory=Rootfs)
    cgroup: Cgroup = field(default_factory=Cgroup)


_sandbox_ids = itertools.count(1)


@dataclass
class Sandbox:
    id: int
    kind: SandboxKind
    components: SandboxComponents = field(default_factory=SandboxComponents)
    state: SandboxState = SandboxState.CREATING
    last_function: Optional[str] = None
    instance: Optional[str] = None
    network_setups: int = 0
    history: list = field(default_factory=list)

    def _move(self, dst: SandboxState) -> None:
        if not transition_allowed(self.state, dst):
            raise InvalidState(f"sandbox {self.id}: {self.state.value} -> {dst.value} not allowed")
        self.history.append((self.state, dst))
        self.state = dst

    def destroy(self) -> None:
        self._move(SandboxState.DESTROYED)

    def run_instance(self, instance: str, files: int = 1, connections: int = 1) -> None:
        """Record the side effects an instance leaves inside the sandbox."""
        if self.state is not SandboxState.ACTIVE:
            raise InvalidState(f"sandbox {self.id} is {self.state.value}")
        self.instance = instance
        for i in range(files):
            self.components.rootfs.upper_files[f"/tmp/{instance}/{i}"] = instance
        for i in range(connections):
            self.components.netns.connections[f"{instance}:{i}"] = instance
        self.components.cgroup.procs[f"{instance}:init"] = instance

    def artifacts_of(self, instance: str) -> list:
        c = self.components
        out = [p for p, o in c.rootfs.upper_files.items() if o == instance]
        out += [k for k, o in c.netns.connections.items() if o == instance]
        out += [k for k, o in c.cgroup.procs.items() if o == instance]
        return out


@dataclass
class ColdCostRanges:
    """Component cost bands (ms) and how samples are drawn from them.

    Each component is sampled log-uniformly from the bottom ``spread`` share
    of its band (in log space); a spread of 1 uses the whole band.
    """

    network_ms: tuple = (80.0, 10000.0)
    rootfs_ms: tuple = (10.0, 800.0)
    cgroup_create_ms: tuple = (16.0, 32.0)
    cgroup_migrate_ms: tuple = (10.0, 50.0)
    cgroup_combined_ms: tuple = (30.0, 400.0)
    other_ns_ms: tuple = (0.0, 1.0)
    process_other_ms: tuple = (3.0, 15.0)
    network_spread: float = 0.05
    rootfs_spread: float = 0.8
    cgroup_create_spread: float = 1.0
    cgroup_model: str = "split"  # or "combined"
    # migration and per-process restore work grow with the thread count
    migrate_base_ms: float = 9.232
    migrate_per_thread_ms: float = 0.2835
    process_other_base_ms: float = 3.6
    process_other_per_thread_ms: float = 0.0787
    thread_jitter: float = 0.1
    concurrency_slope: float = 4.0 / 14.0
    hypervisor_spawn_ms: float = 10.0

    def __post_init__(self):
        for name in ("network_ms", "rootfs_ms", "cgroup_create_ms", "cgroup_migrate_ms",
                     "cgroup_combined_ms", "other_ns_ms", "process_other_ms"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name}: bad range {lo}..{hi}")
        if self.cgroup_model not in ("split", "combined"):
            raise ConfigError(f"unknown cgroup_model {self.cgroup_model!r}")
        if self.concurrency_slope < 0:
            raise ConfigError("concurrency_slope must be >= 0")

    def concurrency_scale(self, concurrent: int) -> float:
        if concurrent < 1:
            raise ValueError("concurrent starts must be >= 1")
        return 1.0 + (concurrent - 1) * self.concurrency_slope

    def cgroup_migrate(self, threads: int, rng: np.random.Generator) -> float:
        lo, hi = self.cgroup_migrate_ms
        base = min(max(self.migrate_base_ms + self.migrate_per_thread_ms * threads, lo), hi)
        return base * rng.uniform(1.0 - self.thread_jitter, 1.0 + self.thread_jitter)

    def process_other(self, threads: int, rng: np.random.Generator) -> float:
        lo, hi = self.process_other_ms
        base = min(max(self.process_other_base_ms + self.process_other_per_thread_ms * threads, lo), hi)
        return base * rng.uniform(1.0 - self.thread_jitter, 1.0 + self.thread_jitter)


def _log_uniform(band: tuple, spread: float, rng: np.random.Generator) -> float:
    lo, hi = band
    u = rng.random()
    if lo <= 0:
        return lo + (hi - lo) * spread * u
    return lo * math.exp(math.log(hi / lo) * spread * u)


def create_cold(kind, function_id: str, concurrent_cold_starts: int, rng: np.random.Generator,
                ranges: Optional[ColdCostRanges] = None, threads: int = 1,
                sandbox_id: Optional[int] = None) -> tuple[Sandbox, float, dict]:
    """Build a sandbox from scratch.  Returns (sandbox, latency ms, per-component ms)."""
    r = ranges or ColdCostRanges()
    kind = SandboxKind(kind)
    scale = r.concurrency_scale(concurrent_cold_starts)
    parts = {
        "network": _log_uniform(r.network_ms, r.network_spread, rng),
        "rootfs": _log_uniform(r.rootfs_ms, r.rootfs_spread, rng),
    }
    if r.cgroup_model == "split":
        parts["cgroup_create"] = _log_uniform(r.cgroup_create_ms, r.cgroup_create_spread, rng)
        parts["cgroup_migrate"] = r.cgroup_migrate(threads, rng)
    else:
        parts["cgroup"] = _log_uniform(r.cgroup_combined_ms, 1.0, rng)
    lo, hi = r.other_ns_ms
    parts["other_ns"] = float(rng.uniform(lo, hi))
    if kind is SandboxKind.VM:
        parts["hypervisor"] = r.hypervisor_spawn_ms
    breakdown = {k: v * scale for k, v in parts.items()}

    sb = Sandbox(sandbox_id if sandbox_id is not None else next(_sandbox_ids), kind)
    c = sb.components
    c.netns.configured = True
    sb.network_setups += 1
    c.rootfs.function_overlay_id = function_id
    c.cgroup.exists = True
    sb.last_function = function_id
    sb._move(SandboxState.ACTIVE)
    return sb, sum(breakdown.values()), breakdown


@dataclass
class CleanParams:
    kill_ms: float = 0.5
    purge_base_ms: float = 2.5
    purge_per_file_ms: float = 0.01


def clean(sb: Sandbox, params: Optional[CleanParams] = None) -> float:
    """Kill the sandbox's processes and close its connections now; returns the
    duration of the asynchronous upper-directory purge that must elapse before
    :func:`finish_clean` can pool the sandbox."""
    p = params or CleanParams()
    if sb.state is not SandboxState.ACTIVE:
        raise InvalidState(f"sandbox {sb.id} is {sb.state.value}, not ACTIVE")
    c = sb.components
    c.cgroup.procs.clear()
    c.netns.connections.clear()
    dirty = len(c.rootfs.upper_files)
    sb._move(SandboxState.CLEANING)
    return p.kill_ms + p.purge_base_ms + p.purge_per_file_ms * dirty


def finish_clean(sb: Sandbox, overlays: Optional["OverlayPool"] = None) -> None:
    """Complete the purge: drop upper files, unmount the function overlay, pool."""
    if sb.state is not SandboxState.CLEANING:
        raise InvalidState(f"sandbox {sb.id} is {sb.state.value}, not CLEANING")
    rootfs = sb.components.rootfs
    rootfs.upper_files.clear()
    if overlays is not None and rootfs.function_overlay_id is not None:
        overlays.release(rootfs.function_overlay_id)
    rootfs.function_overlay_id = None
    sb.instance = None
    sb._move(SandboxState.POOLED)


class OverlayPool:
    """Ready-to-mount function overlays, keyed by function id."""

    def __init__(self, capacity: Optional[int] = None):
        self.capacity = capacity
        self.ready: dict[str, int] = {}

    def prepare(self, function_id: str, count: int = 1) -> None:
        for _ in range(count):
            self.release(function_id)

    def acquire(self, function_id: str) -> bool:
        n = self.ready.get(function_id, 0)
        if n:
            self.ready[function_id] = n - 1
            return True
        return False

    def release(self, function_id: str) -> None:
        if self.capacity is not None and sum(self.ready.values()) >= self.capacity:
            return
        self.ready[function_id] = self.ready.get(function_id, 0) + 1


@dataclass
class RepurposeParams:
    overlay_mount_hit_ms: float = 0.35
    overlay_mount_miss_ms: float = 0.7
    proc_mount_ms: float = 0.25
    cgroup_clone_ms: tuple = (0.1, 0.3)
    cgroup_clone: bool = True  # False: migrate the restored process instead


def repurpose(sb: Sandbox, new_function_id: str, rng: np.random.Generator,
              params: Optional[RepurposeParams] = None, overlays: Optional[OverlayPool] = None,
              ranges: Optional[ColdCostRanges] = None, threads: int = 1) -> tuple[float, dict]:
    """Turn a pooled sandbox into one for ``new_function_id``, whatever it ran before."""
    p = params or RepurposeParams()
    if sb.state is not SandboxState.POOLED:
        raise InvalidState(f"sandbox {sb.id} is {sb.state.value}, not POOLED")
    hit = overlays.acquire(new_function_id) if overlays is not None else False
    breakdown = {
        "rootfs_reconfig": (p.overlay_mount_hit_ms if hit else p.overlay_mount_miss_ms) + p.proc_mount_ms,
    }
    if p.cgroup_clone:
        breakdown["cgroup_clone"] = float(rng.uniform(*p.cgroup_clone_ms))
    else:
        breakdown["cgroup_migrate"] = (ranges or ColdCostRanges()).cgroup_migrate(threads, rng)
    sb.components.rootfs.function_overlay_id = new_function_id
    sb.last_function = new_function_id
    sb._move(SandboxState.ACTIVE)
    return sum(breakdown.values()), breakdown
