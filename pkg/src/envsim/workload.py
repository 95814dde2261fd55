"""Function and agent catalogs, synthetic invocation generators and trace replay."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, EnvSimError, UnknownFunction
from .units import MiB, US_PER_S

CATEGORIES = ("memory_insensitive", "large_footprint", "brief")


class ParseError(EnvSimError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class FunctionProfile:
    id: str
    language: str
    image_mb: float
    threads: int
    base_exec_ms: float
    touched_fraction: float
    read_only_ratio: float
    category: str
    exec_sigma: float = 0.1
    anon_fraction: float = 0.7
    vma_count: int = 200
    bootstrap_ms: float = 200.0
    description: str = ""
    estimated: tuple = ()

    def __post_init__(self):
        if self.image_mb <= 0:
            raise ConfigError(f"{self.id}: image size must be > 0")
        for name in ("touched_fraction", "read_only_ratio", "anon_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{self.id}: {name} must be in [0, 1]")
        if self.category not in CATEGORIES:
            raise ConfigError(f"{self.id}: unknown category {self.category!r}")
        if self.base_exec_ms < 0 or self.exec_sigma < 0 or self.threads < 1:
            raise ConfigError(f"{self.id}: invalid execution parameters")

    @property
    def image_bytes(self) -> int:
        return int(round(self.image_mb * MiB))

    @property
    def read_fraction(self) -> float:
        """Share of image pages only read during one invocation."""
        return self.touched_fraction * self.read_only_ratio

    @property
    def write_fraction(self) -> float:
        """Share of image pages written during one invocation."""
        return self.touched_fraction * (1.0 - self.read_only_ratio)

    def sample_exec_ms(self, rng: np.random.Generator) -> float:
        if self.exec_sigma == 0:
            return self.base_exec_ms
        return float(self.base_exec_ms * rng.lognormal(0.0, self.exec_sigma))


@dataclass(frozen=True)
class Segment:
    kind: str  # "llm_wait" or "cpu"
    duration_s: float  # uncontended wall time


@dataclass(frozen=True)
class AgentProfile:
    id: str
    name: str
    framework: str
    e2e_base_s: float
    memory_mb: float
    cpu_time_s: float
    input_tokens: int
    output_tokens: int
    browser_required: bool
    allocated_gb: float = 2.0
    spike_demand: float = 1.0  # cores busy during a tool/browser step
    shareable_fraction: float = 0.0  # CPU work a shared browser amortizes
    base_file_read_mb: float = 0.0
    estimated: tuple = ()

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ConfigError(f"{self.id}: token counts must be >= 0")
        if not 0 < self.spike_demand:
            raise ConfigError(f"{self.id}: spike_demand must be > 0")
        if self.cpu_time_s / self.spike_demand > self.e2e_base_s:
            raise ConfigError(f"{self.id}: CPU phases exceed end-to-end time")

    @property
    def cpu_phase_s(self) -> float:
        """Uncontended wall time spent in CPU phases."""
        return self.cpu_time_s / self.spike_demand

    def phase_trace(self, rng: Optional[np.random.Generator] = None, k: int = 8,
                    wait_sigma: float = 0.0) -> list[Segment]:
        """Alternate ``k + 1`` LLM waits with ``k`` equal CPU steps.

        The waits fill the rest of the end-to-end time; ``wait_sigma`` adds
        mean-preserving lognormal noise per wait.
        """
        cpu = self.cpu_phase_s / k
        wait_total = self.e2e_base_s - self.cpu_phase_s
        waits = np.full(k + 1, wait_total / (k + 1))
        if wait_sigma > 0:
            if rng is None:
                raise ValueError("wait noise needs an rng")
            waits = waits * rng.lognormal(-0.5 * wait_sigma ** 2, wait_sigma, size=k + 1)
        out = []
        for i in range(k):
            out.append(Segment("llm_wait", float(waits[i])))
            out.append(Segment("cpu", cpu))
        out.append(Segment("llm_wait", float(waits[k])))
        return out


@dataclass
class Catalog:
    functions: dict
    agents: dict

    def function(self, fid: str) -> FunctionProfile:
        try:
            return self.functions[fid]
        except KeyError:
            raise UnknownFunction(fid) from None


def _build_catalog(data: dict) -> Catalog:
    funcs = {}
    for f in data.get("functions", []):
        f = dict(f)
        f["estimated"] = tuple(f.get("estimated", ()))
        funcs[f["id"]] = FunctionProfile(**f)
    agents = {}
    for a in data.get("agents", []):
        a = dict(a)
        a["estimated"] = tuple(a.get("estimated", ()))
        agents[a["id"]] = AgentProfile(**a)
    return Catalog(funcs, agents)


def load_catalog(path: Union[str, Path, None] = None) -> Catalog:
    """Load a catalog JSON file, or the bundled default when ``path`` is None."""
    if path is None:
        text = resources.files("envsim").joinpath("data/catalog.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        return _build_catalog(json.loads(text))
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad catalog: {exc}") from exc


@dataclass
class InvocationTrace:
    """Invocations sorted by arrival time (µs)."""

    function_ids: list = field(default_factory=list)
    arrivals_us: list = field(default_factory=list)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, float]]) -> "InvocationTrace":
        # stable sort keeps generation order among equal arrival times
        items = sorted(pairs, key=lambda p: p[1])
        return cls([f for f, _ in items], [float(t) for _, t in items])

    def __len__(self) -> int:
        return len(self.arrivals_us)

    def __iter__(self) -> Iterator[tuple[str, float]]:
        return iter(zip(self.function_ids, self.arrivals_us))

    def counts(self) -> dict:
        out: dict = {}
        for f in self.function_ids:
            out[f] = out.get(f, 0) + 1
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["function_id", "arrival_us"])
        for f, t in self:
            w.writerow([f, f"{t:.3f}"])
        return buf.getvalue()


def gen_w1(functions: Sequence[str], burst_size: int, burst_interval_s: float, duration_s: float,
           rng: np.random.Generator, keep_alive_s: float = 600.0, spread_ms: float = 5.0,
           stagger_s: float = 0.0) -> InvocationTrace:
    """Periodic bursts of near-simultaneous invocations per function.

    Bursts must be spaced beyond the keep-alive window so that no instance
    from one burst survives to serve the next.
    """
    if burst_interval_s <= keep_alive_s:
        raise ConfigError(
            f"burst interval {burst_interval_s}s must exceed keep-alive {keep_alive_s}s")
    if burst_size < 1 or duration_s <= 0:
        raise ConfigError("burst_size and duration must be positive")
    pairs = []
    for i, fid in enumerate(functions):
        t0 = i * stagger_s
        k = 0
        while t0 + k * burst_interval_s < duration_s:
            base = (t0 + k * burst_interval_s) * US_PER_S
            offsets = rng.uniform(0.0, spread_ms * 1000.0, size=burst_size)
            pairs.extend((fid, base + float(o)) for o in offsets)
            k += 1
    return InvocationTrace.from_pairs(pairs)


def gen_w2(functions: Sequence[str], cycle_s: float, intensity: float, mem_cap_bytes: int,
           duration_s: float, rng: np.random.Generator,
           amplitude: float = 0.8) -> tuple[InvocationTrace, int]:
    """Diurnal-style load: per-function sinusoidal rates, phase shifted evenly.

    ``intensity`` is the mean total arrival rate (invocations/s) shared
    equally by the functions.  Arrivals are drawn by thinning a Poisson
    process at the peak rate.
    """
    if cycle_s <= 0:
        raise ConfigError("cycle_s must be > 0")
    if not 0.0 <= amplitude <= 1.0:
        raise ConfigError("amplitude must be in [0, 1]")
    n = len(functions)
    if n == 0 or intensity <= 0:
        return InvocationTrace(), mem_cap_bytes
    base = intensity / n
    peak = base * (1.0 + amplitude)
    pairs = []
    for i, fid in enumerate(functions):
        phase = 2.0 * math.pi * i / n
        count = rng.poisson(peak * duration_s)
        times = np.sort(rng.uniform(0.0, duration_s, size=count))
        rate = base * (1.0 + amplitude * np.sin(2.0 * math.pi * times / cycle_s + phase))
        keep = rng.uniform(0.0, peak, size=count) < rate
        pairs.extend((fid, float(t) * US_PER_S) for t in times[keep])
    return InvocationTrace.from_pairs(pairs), mem_cap_bytes


def load_trace(source: Union[str, Path, io.TextIOBase], rng: np.random.Generator,
               skew_prob: float = 0.0, skew_window_s: float = 5.0) -> InvocationTrace:
    """Expand per-minute invocation counts into arrival times.

    Each minute's arrivals are placed uniformly within the minute, except
    that with probability ``skew_prob`` a minute is compressed into a burst
    window of ``skew_window_s`` seconds at a random position.
    """
    if not 0.0 <= skew_prob <= 1.0:
        raise ConfigError("skew_prob must be in [0, 1]")
    if not 0.0 < skew_window_s <= 60.0:
        raise ConfigError("skew_window_s must be in (0, 60]")
    is_text = isinstance(source, str) and "\n" in source
    if isinstance(source, Path) or (isinstance(source, str) and not is_text):
        try:
            fh = open(source, newline="", encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read trace {source}: {exc}") from exc
        close = True
    elif isinstance(source, str):
        fh, close = io.StringIO(source), False
    else:
        fh, close = source, False
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["function_id", "minute_index", "invocations"]:
            raise ParseError(1, "expected header function_id,minute_index,invocations")
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(lineno, f"expected 3 fields, got {len(row)}")
            fid = row[0].strip()
            if not fid:
                raise ParseError(lineno, "empty function_id")
            try:
                minute = int(row[1])
                count = int(row[2])
            except ValueError:
                raise ParseError(lineno, "minute_index and invocations must be integers") from None
            if minute < 0 or count < 0:
                raise ParseError(lineno, "minute_index and invocations must be >= 0")
            if count == 0:
                continue
            start, width = minute * 60.0, 60.0
            if skew_prob > 0 and rng.random() < skew_prob:
                start += rng.uniform(0.0, 60.0 - skew_window_s)
                width = skew_window_s
            offs = rng.uniform(0.0, width, size=count)
            pairs.extend((fid, (start + float(o)) * US_PER_S) for o in offs)
    finally:
        if close:
            fh.close()
    return InvocationTrace.from_pairs(pairs)
