"""Agent cost accounting: LLM token cost against billed serverless execution cost."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

from .errors import ConfigError
from .workload import AgentProfile

DEFAULT_P_S = 1.67e-8  # $ per ms per GB
FLAG_THRESHOLD = 0.4
UNDEFINED = "undefined"


@dataclass(frozen=True)
class PriceSheet:
    p_in: float  # $ per input token
    p_out: float  # $ per output token
    p_s: float = DEFAULT_P_S

    def __post_init__(self):
        if min(self.p_in, self.p_out, self.p_s) < 0:
            raise ConfigError("prices must be >= 0")

    def scaled(self, k: float) -> "PriceSheet":
        return PriceSheet(self.p_in * k, self.p_out * k, self.p_s * k)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "PriceSheet":
        data = json.loads(Path(path).read_text())
        missing = {"p_in", "p_out"} - set(data)
        if missing:
            raise ConfigError(f"price sheet lacks {sorted(missing)}; LLM prices have no default")
        unknown = set(data) - {"p_in", "p_out", "p_s"}
        if unknown:
            raise ConfigError(f"unknown price keys {sorted(unknown)}")
        return cls(float(data["p_in"]), float(data["p_out"]), float(data.get("p_s", DEFAULT_P_S)))


def llm_cost(l_in: float, l_out: float, prices: PriceSheet) -> float:
    if l_in < 0 or l_out < 0:
        raise ValueError("token counts must be >= 0")
    return l_in * prices.p_in + l_out * prices.p_out


def serverless_cost(t_ms: float, mem_gb: float, prices: PriceSheet) -> float:
    """Duration-and-memory billing: t_ms * p_s * mem_gb."""
    if t_ms < 0:
        raise ValueError("t_ms must be >= 0")
    if mem_gb <= 0:
        raise ValueError("mem_gb must be > 0")
    return t_ms * prices.p_s * mem_gb


@dataclass(frozen=True)
class CostRow:
    agent: str
    c_llm: float
    c_s: float
    ratio: Optional[float]  # None when the LLM cost is zero
    flagged: bool


def relative_cost_report(agents: Iterable[AgentProfile], prices: PriceSheet) -> list[CostRow]:
    """C_s / C_LLM per agent, billed at allocated memory for the whole run."""
    rows = []
    for a in agents:
        c_llm = llm_cost(a.input_tokens, a.output_tokens, prices)
        c_s = serverless_cost(a.e2e_base_s * 1000.0, a.allocated_gb, prices)
        ratio = c_s / c_llm if c_llm > 0 else None
        rows.append(CostRow(a.name, c_llm, c_s, ratio, ratio is not None and ratio >= FLAG_THRESHOLD))
    return rows


def report_csv(rows: list[CostRow], prices: PriceSheet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agent", "c_llm", "c_s", "ratio", "flagged", "p_in", "p_out", "p_s"])
    for r in rows:
        ratio = UNDEFINED if r.ratio is None else repr(r.ratio)
        w.writerow([r.agent, repr(r.c_llm), repr(r.c_s), ratio, str(r.flagged).lower(),
                    repr(prices.p_in), repr(prices.p_out), repr(prices.p_s)])
    return buf.getvalue()


def load_agents(path: Union[str, Path]) -> list[AgentProfile]:
    """Agents JSON: a list of agent objects or a catalog with an ``agents`` key."""
    data = json.loads(Path(path).read_text())
    items = data["agents"] if isinstance(data, dict) else data
    out = []
    for a in items:
        a = dict(a)
        a["estimated"] = tuple(a.get("estimated", ()))
        try:
            out.append(AgentProfile(**a))
        except TypeError as exc:
            raise ConfigError(f"bad agent entry: {exc}") from exc
    return out

