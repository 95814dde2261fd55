"""Result files: per-invocation metrics, summaries, latency CDFs and arm comparisons."""
from __future__ import annotations

import collections
import csv
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .platform import SimResult
from .simcore import percentile

PERCENTILES = (50, 75, 99)
METRICS = ("e2e_ms", "startup_ms", "exec_ms")


class IncomparableScenarios(ConfigError):
    """Two arms were driven by different workloads or seeds."""


def _round(obj, ndigits: int = 3):
    if isinstance(obj, float):
        return round(obj, ndigits)
    if isinstance(obj, dict):
        return {k: _round(v, ndigits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, ndigits) for v in obj]
    if isinstance(obj, np.generic):
        return _round(obj.item(), ndigits)
    return obj


def rounded_records(result: SimResult) -> list[dict]:
    return [_round(r) for r in result.records] + [_round(m) for m in result.memory]


def write_metrics(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_metrics(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summarize(rows: Sequence[dict], policy: str = "", counters: Optional[dict] = None,
              include_warmup: bool = False) -> dict:
    """Latency percentiles per function (and overall), path counts and peak memory."""
    invs = [r for r in rows if r.get("type") == "invocation" and (include_warmup or not r["warmup"])]
    mem = [r for r in rows if r.get("type") == "memory" and (include_warmup or not r.get("warmup"))]
    by_fn: dict = collections.defaultdict(list)
    for r in invs:
        by_fn[r["function_id"]].append(r)

    def stats(group: list) -> dict:
        out = {"count": len(group)}
        for m in METRICS:
            vals = [r[m] for r in group]
            for p in PERCENTILES:
                out[f"{m[:-3]}_p{p}_ms"] = percentile(vals, p) if vals else None
        return out

    return {
        "policy": policy,
        "invocations": len(invs),
        "functions": {f: stats(g) for f, g in sorted(by_fn.items())},
        "overall": stats(invs),
        "paths": dict(sorted(collections.Counter(r["path"] for r in invs).items())),
        "peak_local_bytes": max((m["local_bytes"] for m in mem), default=0),
        "peak_private_bytes": max((m["private_bytes"] for m in mem), default=0),
        "pool_bytes": max((m["pool_bytes"] for m in mem), default=0),
        "major_faults": sum(r["major_faults"] for r in invs),
        "cow_faults": sum(r["cow_faults"] for r in invs),
        "counters": dict(sorted((counters or {}).items())),
    }


def cdf_rows(rows: Sequence[dict], metric: str = "e2e_ms") -> list[tuple]:
    """Empirical CDF of ``metric`` per function: (function_id, latency, fraction)."""
    by_fn: dict = collections.defaultdict(list)
    for r in rows:
        if r.get("type") == "invocation" and not r["warmup"]:
            by_fn[r["function_id"]].append(r[metric])
    out = []
    for f, vals in sorted(by_fn.items()):
        vals = sorted(vals)
        n = len(vals)
        out.extend((f, v, (i + 1) / n) for i, v in enumerate(vals))
    return out


def write_cdf(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["function_id", "latency_ms", "cumulative_fraction"])
        for f, v, frac in cdf_rows(rows):
            w.writerow([f, v, round(frac, 6)])


def write_run(out_dir: Path, result: SimResult) -> dict:
    """Write metrics.jsonl, summary.json and cdf.csv; returns the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = rounded_records(result)
    write_metrics(out_dir / "metrics.jsonl", rows)
    summary = summarize(rows, result.policy, result.counters)
    summary["template_metadata_bytes"] = dict(sorted(result.template_metadata.items()))
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_cdf(out_dir / "cdf.csv", rows)
    return summary


def comparison_rows(summaries: Sequence[dict], reference: int = 0) -> list[dict]:
    """Per-function speedup of each arm over the reference arm.

    Speedup is reference latency over arm latency, so values above 1 mean
    the arm is faster.  Memory reduction compares peak local memory.
    """
    ref = summaries[reference]
    out = []
    for s in summaries:
        fns = sorted(set(ref["functions"]) & set(s["functions"])) + ["__all__"]
        for f in fns:
            a = s["overall"] if f == "__all__" else s["functions"][f]
            b = ref["overall"] if f == "__all__" else ref["functions"][f]
            row = {"policy": s["policy"], "reference": ref["policy"], "function_id": f}
            for m in ("e2e", "startup", "exec"):
                for p in PERCENTILES:
                    key = f"{m}_p{p}_ms"
                    num, den = b[key], a[key]
                    if num is None or den is None:
                        row[f"{m}_p{p}_speedup"] = None
                    elif num == den:
                        row[f"{m}_p{p}_speedup"] = 1.0
                    else:
                        row[f"{m}_p{p}_speedup"] = num / den if den else None
            ref_mem, mem = ref["peak_local_bytes"], s["peak_local_bytes"]
            row["memory_reduction"] = 1.0 - mem / ref_mem if ref_mem else None
            out.append(row)
    return out


def write_comparison(path: Path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("nothing to compare")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else _round(v, 4)) for k, v in r.items()})
