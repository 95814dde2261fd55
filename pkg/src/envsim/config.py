"""Scenario configuration schema (JSON) and translation into simulator objects."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .mempool import LatencyParams
from .platform import Optimizations, Platform, PlatformParams, Policy
from .sandbox import ColdCostRanges
from .simcore import RngStreams
from .snapshot import SharingSpec
from .units import GiB
from .workload import (Catalog, InvocationTrace, gen_w1, gen_w2, load_catalog, load_trace)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NodeConfig(_Strict):
    cores: int = Field(64, ge=1)
    dram_bytes: int = Field(256 * GiB, gt=0)


class LatencyConfig(_Strict):
    read_latency_ns: Optional[float] = Field(None, ge=0)
    fetch_latency_us: Optional[float] = Field(None, ge=0)
    fault_handling_us: Optional[float] = Field(None, ge=0)
    tail_knee: Optional[float] = Field(None, ge=0, lt=1)
    tail_max: Optional[float] = Field(None, ge=1)


class PoolsConfig(_Strict):
    capacity_bytes: int = Field(256 * GiB, gt=0)
    rdma_capacity: int = Field(32, ge=1)
    latency: Optional[LatencyConfig] = None
    same_language_share: float = Field(0.4, ge=0, le=1)
    cross_language_share: float = Field(0.1, ge=0, le=1)


class W1Config(_Strict):
    kind: Literal["w1"]
    functions: list[str]
    burst_size: int = Field(15, ge=1)
    burst_interval_s: float = 700.0
    duration_s: float = Field(1800.0, gt=0)
    spread_ms: float = Field(5.0, ge=0)
    stagger_s: float = Field(0.0, ge=0)
    seed: Optional[int] = None


class W2Config(_Strict):
    kind: Literal["w2"]
    functions: Optional[list[str]] = None
    cycle_s: float = 600.0
    intensity: float = Field(2.25, ge=0)
    amplitude: float = Field(0.8, ge=0, le=1)
    duration_s: float = Field(1800.0, gt=0)
    mem_cap_bytes: int = Field(32 * GiB, gt=0)
    seed: Optional[int] = None


class TraceConfig(_Strict):
    kind: Literal["trace"]
    path: str
    skew_prob: float = Field(0.0, ge=0, le=1)
    skew_window_s: float = Field(5.0, gt=0, le=60)
    seed: Optional[int] = None


class ListConfig(_Strict):
    kind: Literal["list"]
    invocations: list[tuple[str, float]]  # (function_id, arrival seconds)
    seed: Optional[int] = None


WorkloadConfig = Annotated[Union[W1Config, W2Config, TraceConfig, ListConfig], Field(discriminator="kind")]


class VmConfig(_Strict):
    guest_os_mb: float = Field(150.0, ge=0)
    attach_cost_ms: float = Field(40.0, ge=0)


class OptimizationsConfig(_Strict):
    sandbox_reuse: bool = True
    cgroup_clone: bool = True
    mm_template: bool = True


class ScenarioConfig(_Strict):
    seed: int = 0
    node: NodeConfig = NodeConfig()
    pools: PoolsConfig = PoolsConfig()
    policy: str
    sandbox_kind: Optional[Literal["container", "vm"]] = None
    workload: WorkloadConfig
    catalog: Optional[str] = None
    keep_alive_s: float = Field(600.0, ge=0)
    memory_cap_bytes: Optional[int] = Field(None, gt=0)
    warmup_s: float = Field(0.0, ge=0)
    mem_sample_s: float = Field(1.0, gt=0)
    cgroup_model: Literal["split", "combined"] = "split"
    vm: VmConfig = VmConfig()
    optimizations: OptimizationsConfig = OptimizationsConfig()
    output_dir: Optional[str] = None

    @field_validator("policy")
    @classmethod
    def _known_policy(cls, v: str) -> str:
        Policy.parse(v)
        return v

    @property
    def workload_seed(self) -> int:
        return self.workload.seed if self.workload.seed is not None else self.seed


def parse_config(data: Union[dict, str, Path], base_dir: Optional[Path] = None) -> ScenarioConfig:
    """Validate a scenario given as a dict, a JSON string or a path to a JSON file."""
    if isinstance(data, Path) or (isinstance(data, str) and not data.lstrip().startswith("{")):
        path = Path(data)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base_dir = base_dir or path.parent
        data = text
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        cfg = ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    except ConfigError:
        raise
    # relative file references resolve against the config file's directory
    if base_dir is not None:
        if cfg.catalog and not Path(cfg.catalog).is_absolute():
            cfg.catalog = str(base_dir / cfg.catalog)
        if isinstance(cfg.workload, TraceConfig) and not Path(cfg.workload.path).is_absolute():
            cfg.workload.path = str(base_dir / cfg.workload.path)
    return cfg


def build_policy(cfg: ScenarioConfig) -> Policy:
    return Policy.parse(cfg.policy, cfg.sandbox_kind)


def build_params(cfg: ScenarioConfig, mem_cap: Optional[int]) -> PlatformParams:
    params = PlatformParams(
        keep_alive_s=cfg.keep_alive_s,
        memory_cap_bytes=cfg.memory_cap_bytes if cfg.memory_cap_bytes is not None else mem_cap,
        cores=cfg.node.cores,
        rdma_capacity=cfg.pools.rdma_capacity,
        guest_os_bytes=int(cfg.vm.guest_os_mb * 1024 * 1024),
        pool_capacity_bytes=cfg.pools.capacity_bytes,
        mem_sample_s=cfg.mem_sample_s,
        warmup_s=cfg.warmup_s,
        cold=ColdCostRanges(cgroup_model=cfg.cgroup_model),
        optimizations=Optimizations(**cfg.optimizations.model_dump()),
        sharing=SharingSpec(cfg.pools.same_language_share, cfg.pools.cross_language_share),
    )
    params.fault.attach_cost_vm_ms = cfg.vm.attach_cost_ms
    return params


def latency_override(cfg: ScenarioConfig, base: LatencyParams) -> LatencyParams:
    if cfg.pools.latency is None:
        return base
    changes = {k: v for k, v in cfg.pools.latency.model_dump().items() if v is not None}
    return LatencyParams(**{**base.__dict__, **changes})


def build_trace(cfg: ScenarioConfig, catalog: Catalog) -> tuple[InvocationTrace, Optional[int]]:
    """Generate the scenario's invocation trace; also returns a workload memory cap if any."""
    rng = RngStreams(cfg.workload_seed).get("workload")
    w = cfg.workload
    if isinstance(w, W1Config):
        return gen_w1(w.functions, w.burst_size, w.burst_interval_s, w.duration_s, rng,
                      keep_alive_s=cfg.keep_alive_s, spread_ms=w.spread_ms, stagger_s=w.stagger_s), None
    if isinstance(w, W2Config):
        funcs = w.functions or sorted(catalog.functions)
        return gen_w2(funcs, w.cycle_s, w.intensity, w.mem_cap_bytes, w.duration_s, rng, w.amplitude)
    if isinstance(w, TraceConfig):
        return load_trace(w.path, rng, w.skew_prob, w.skew_window_s), None
    return InvocationTrace.from_pairs((f, t * 1e6) for f, t in w.invocations), None


def build_platform(cfg: ScenarioConfig) -> tuple[Platform, InvocationTrace]:
    catalog = load_catalog(cfg.catalog)
    trace, cap = build_trace(cfg, catalog)
    params = build_params(cfg, cap)
    functions = sorted(set(trace.function_ids)) or sorted(catalog.functions)
    for f in functions:
        catalog.function(f)
    platform = Platform(catalog, build_policy(cfg), params, seed=cfg.seed, functions=functions)
    for store in platform.pools.values():
        store.latency = latency_override(cfg, store.latency)
    return platform, trace


def workload_identity(cfg: ScenarioConfig) -> str:
    """Canonical description of what arrives, used to check arms are comparable."""
    return json.dumps({"workload": cfg.workload.model_dump(exclude={"seed"}),
                       "seed": cfg.workload_seed, "catalog": cfg.catalog}, sort_keys=True)


__all__ = ["ScenarioConfig", "parse_config", "build_platform", "build_trace", "workload_identity"]
