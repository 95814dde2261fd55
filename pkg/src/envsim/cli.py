"""Command-line entry point: ``envsim simulate | compare | cost``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .config import ScenarioConfig, build_platform, parse_config, workload_identity
from .costmodel import PriceSheet, load_agents, relative_cost_report, report_csv
from .errors import ConfigError
from .report import IncomparableScenarios, comparison_rows, write_comparison, write_run

log = logging.getLogger("envsim")

# fields an arm may change; everything else must match across compared configs
ARM_FIELDS = {"policy", "sandbox_kind", "pools", "optimizations", "output_dir", "vm"}


def _setup_logging() -> None:
    level = os.environ.get("ENVSIM_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def run_scenario(cfg: ScenarioConfig, out_dir: Path) -> dict:
    platform, trace = build_platform(cfg)
    log.info("simulating %s: %d invocations", cfg.policy, len(trace))
    result = platform.run(trace)
    summary = write_run(out_dir, result)
    log.info("wrote %s", out_dir)
    return summary


def _arm(args) -> dict:
    cfg, out = args
    return run_scenario(cfg, out)


def check_comparable(cfgs: Sequence[ScenarioConfig]) -> None:
    if len(cfgs) < 2:
        raise ConfigError("compare needs at least two configs")
    ids = {workload_identity(c) for c in cfgs}
    if len(ids) > 1:
        raise IncomparableScenarios("arms use different workloads or workload seeds")
    rest = {json.dumps(c.model_dump(exclude=ARM_FIELDS), sort_keys=True, default=str) for c in cfgs}
    if len(rest) > 1:
        raise IncomparableScenarios("arms differ in more than policy and pool settings")


def cmd_simulate(ns) -> int:
    cfg = parse_config(Path(ns.config))
    if ns.seed is not None:
        cfg.seed = ns.seed
    out = Path(ns.out or cfg.output_dir or ".")
    summary = run_scenario(cfg, out)
    print(f"{summary['policy']}: {summary['invocations']} invocations -> {out}")
    return 0


def cmd_compare(ns) -> int:
    paths = [Path(p) for p in ns.configs.split(",") if p]
    cfgs = [parse_config(p) for p in paths]
    check_comparable(cfgs)
    out = Path(ns.out)
    jobs = [(c, out / f"arm{i}_{c.policy}") for i, c in enumerate(cfgs)]
    if ns.jobs > 1:
        with ProcessPoolExecutor(ns.jobs) as pool:
            summaries = list(pool.map(_arm, jobs))
    else:
        summaries = [_arm(j) for j in jobs]
    write_comparison(out / "comparison.csv", comparison_rows(summaries))
    print(f"compared {len(cfgs)} arms -> {out / 'comparison.csv'}")
    return 0


def cmd_cost(ns) -> int:
    try:
        agents = load_agents(ns.agents)
        prices = PriceSheet.from_json(ns.prices)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cost.csv").write_text(report_csv(relative_cost_report(agents, prices), prices))
    print(f"{len(agents)} agents -> {out / 'cost.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="envsim", description="Serverless restore and agent cost simulator")
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", help="run one scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)
    c = sub.add_parser("compare", help="run several arms of one workload and compare them")
    c.add_argument("--configs", required=True, help="comma-separated config files; the first is the reference")
    c.add_argument("--out", required=True)
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_compare)
    k = sub.add_parser("cost", help="serverless vs LLM cost table for agents")
    k.add_argument("--agents", required=True)
    k.add_argument("--prices", required=True)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_cost)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
