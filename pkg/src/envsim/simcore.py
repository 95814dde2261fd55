"""Discrete-event engine, seeded random substreams, CPU contention and percentiles."""
from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import EnvSimError


class EmptySamples(EnvSimError, ValueError):
    pass


class CausalityError(EnvSimError):
    pass


@dataclass(order=True)
class SimEvent:
    time: float  # µs
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(default=None, compare=False)


class Engine:
    """Min-heap event loop ordered by (time, insertion sequence).

    Handlers are registered per event kind and may schedule further events,
    but never before the current clock.
    """

    def __init__(self):
        self.now = 0.0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._handlers: dict[str, Callable[[SimEvent], None]] = {}
        self.processed = 0

    def on(self, kind: str, handler: Callable[[SimEvent], None]) -> None:
        self._handlers[kind] = handler

    def schedule(self, time_us: float, kind: str, payload: Any = None) -> SimEvent:
        if time_us < self.now:
            raise CausalityError(f"event {kind!r} at {time_us} scheduled before now={self.now}")
        ev = SimEvent(float(time_us), self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def __len__(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[float]:
        return self._queue[0].time if self._queue else None

    def run(self, until: float = math.inf) -> float:
        """Process events with ``time <= until``; returns the final clock."""
        while self._queue and self._queue[0].time <= until:
            ev = heapq.heappop(self._queue)
            self.now = ev.time
            handler = self._handlers.get(ev.kind)
            if handler is None:
                raise KeyError(f"no handler for event kind {ev.kind!r}")
            handler(ev)
            self.processed += 1
        return self.now


def stable_hash(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


class RngStreams:
    """Independent named generators derived from one scenario seed.

    Drawing from one stream never shifts the values of another, so changing
    how one module samples leaves the rest of a run untouched.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            ss = np.random.SeedSequence([self.seed, stable_hash(name)])
            gen = self._streams[name] = np.random.default_rng(ss)
        return gen

    __getitem__ = get


def cpu_slowdown(runnable_vcpus: float, physical_cores: float, gamma: float = 1.0) -> float:
    """Stretch factor for CPU-bound work when ``runnable_vcpus`` share the cores."""
    if runnable_vcpus < 0 or physical_cores < 0:
        raise ValueError("inputs must be >= 0")
    if physical_cores == 0:
        return math.inf if runnable_vcpus > 0 else 1.0
    load = runnable_vcpus / physical_cores
    return max(1.0, load) ** gamma


@dataclass
class CpuModel:
    physical_cores: float
    gamma: float = 1.0
    overcommit: float = 1.0

    def slowdown(self, demand: float) -> float:
        return cpu_slowdown(demand, self.physical_cores, self.gamma)


@dataclass
class LinearContention:
    """Slowdown growing by ``slope`` for every job beyond the first."""

    slope: float

    def slowdown(self, demand: float) -> float:
        return 1.0 + max(demand - 1.0, 0.0) * self.slope


class FluidCpu:
    """Processor-sharing CPU shared by jobs with fractional core demand.

    ``work`` is a job's uncontended duration in µs and ``demand`` the cores it
    keeps busy meanwhile.  All jobs progress at ``1 / slowdown(sum(demand))``
    wall-µs per µs, so advancing the clock is exact between arrivals and
    completions.
    """

    def __init__(self, model: CpuModel):
        self.model = model
        self.jobs: dict[Any, list] = {}  # key -> [remaining_work_us, demand]
        self.clock = 0.0

    @property
    def total_demand(self) -> float:
        return sum(j[1] for j in self.jobs.values())

    def _rate_scale(self) -> float:
        return 1.0 / self.model.slowdown(self.total_demand)

    def advance(self, t: float) -> None:
        dt = t - self.clock
        if dt < -1e-9:
            raise CausalityError("cpu clock moved backwards")
        if dt > 0 and self.jobs:
            scale = self._rate_scale()
            for job in self.jobs.values():
                job[0] -= dt * scale
        self.clock = max(self.clock, t)

    def add(self, key, work_us: float, demand: float) -> None:
        if demand <= 0:
            raise ValueError("demand must be > 0")
        self.jobs[key] = [float(work_us), float(demand)]

    def remove(self, key) -> None:
        self.jobs.pop(key, None)

    def next_completion(self) -> Optional[tuple[float, Any]]:
        if not self.jobs:
            return None
        scale = self._rate_scale()
        key, job = min(self.jobs.items(), key=lambda kv: (kv[1][0], str(kv[0])))
        return self.clock + max(job[0], 0.0) / scale, key

    def progress_rate(self) -> float:
        """Uncontended µs completed per wall µs under the current load."""
        return self._rate_scale()


def percentile(samples: Sequence[float] | Iterable[float], p: float) -> float:
    """Nearest-rank percentile: the smallest value with at least p% of samples <= it."""
    data = np.sort(np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples,
                              dtype=float))
    if data.size == 0:
        raise EmptySamples("percentile of an empty sample")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"p must be in [0, 100], got {p}")
    rank = max(1, math.ceil(p * data.size / 100.0 - 1e-9))
    return float(data[rank - 1])
