import csv
import json

import pytest

from envsim.cli import check_comparable, main
from envsim.config import parse_config
from envsim.errors import ConfigError
from envsim.report import (IncomparableScenarios, PERCENTILES, comparison_rows, read_metrics, summarize)
from envsim.simcore import percentile


def list_config(n=10, policy="TRENV-CXL", seed=3, **kw):
    cfg = {"seed": seed, "policy": policy,
           "workload": {"kind": "list", "invocations": [["CR", 60.0 * i] for i in range(n)]}}
    cfg.update(kw)
    return cfg


def w1_config(policy, seed=1, **kw):
    cfg = {"seed": seed, "policy": policy, "warmup_s": 300,
           "workload": {"kind": "w1", "functions": ["CR"], "burst_size": 15,
                        "burst_interval_s": 700, "duration_s": 1800}}
    cfg.update(kw)
    return cfg


def write(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def simulate(tmp_path, cfg, name="run"):
    path = write(tmp_path, f"{name}.json", cfg)
    out = tmp_path / name
    assert main(["simulate", "--config", str(path), "--out", str(out)]) == 0
    return out


def test_minimal_config_ten_records(tmp_path):
    out = simulate(tmp_path, list_config())
    rows = read_metrics(out / "metrics.jsonl")
    assert len([r for r in rows if r["type"] == "invocation"]) == 10
    assert {p.name for p in out.iterdir()} == {"metrics.jsonl", "summary.json", "cdf.csv"}


def test_same_seed_identical_summary_bytes(tmp_path):
    a = simulate(tmp_path, list_config(), "a")
    b = simulate(tmp_path, list_config(), "b")
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    path = write(tmp_path, "c.json", list_config())
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "x"), "--seed", "9"]) == 0


def test_summary_recomputes_from_metrics(tmp_path):
    out = simulate(tmp_path, list_config(n=30))
    rows = read_metrics(out / "metrics.jsonl")
    summary = json.loads((out / "summary.json").read_text())
    invs = [r for r in rows if r["type"] == "invocation" and not r["warmup"]]
    for m in ("e2e", "startup", "exec"):
        for p in PERCENTILES:
            assert summary["overall"][f"{m}_p{p}_ms"] == percentile([r[f"{m}_ms"] for r in invs], p)
    mem = [r for r in rows if r["type"] == "memory"]
    assert summary["peak_local_bytes"] == max(r["local_bytes"] for r in mem)
    assert sum(summary["paths"].values()) == summary["invocations"] == len(invs)


def test_cdf_is_monotone_and_complete(tmp_path):
    out = simulate(tmp_path, list_config(n=25))
    with open(out / "cdf.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["function_id", "latency_ms", "cumulative_fraction"]
    fracs = [float(r["cumulative_fraction"]) for r in rows]
    lat = [float(r["latency_ms"]) for r in rows]
    assert fracs == sorted(fracs) and fracs[-1] == 1.0
    assert lat == sorted(lat)


def test_trenv_vs_criu_two_arms(tmp_path):
    a = write(tmp_path, "trenv.json", w1_config("TRENV-CXL"))
    b = write(tmp_path, "criu.json", w1_config("CRIU"))
    out = tmp_path / "cmp"
    assert main(["compare", "--configs", f"{b},{a}", "--out", str(out)]) == 0
    trenv = json.loads((out / "arm1_TRENV-CXL" / "summary.json").read_text())
    criu = json.loads((out / "arm0_CRIU" / "summary.json").read_text())
    assert trenv["overall"]["startup_p99_ms"] < 0.1 * criu["overall"]["startup_p99_ms"]
    with open(out / "comparison.csv") as fh:
        rows = {(r["policy"], r["function_id"]): r for r in csv.DictReader(fh)}
    assert float(rows[("TRENV-CXL", "__all__")]["startup_p99_speedup"]) > 10


def test_identical_arms_speed_up_by_one(tmp_path):
    out = simulate(tmp_path, list_config())
    s = json.loads((out / "summary.json").read_text())
    for row in comparison_rows([s, s]):
        for k, v in row.items():
            if k.endswith("_speedup"):
                assert v == 1.0
        assert row["memory_reduction"] == 0.0


def test_different_workload_seeds_incomparable(tmp_path):
    a = write(tmp_path, "a.json", list_config(seed=1))
    b = write(tmp_path, "b.json", list_config(seed=2, policy="CRIU"))
    with pytest.raises(IncomparableScenarios):
        check_comparable([parse_config(a), parse_config(b)])
    assert main(["compare", "--configs", f"{a},{b}", "--out", str(tmp_path / "o")]) == 2


def test_arms_may_differ_only_in_policy_and_pools():
    base = parse_config(list_config())
    check_comparable([base, parse_config(list_config(policy="TRENV-RDMA", pools={"rdma_capacity": 8}))])
    with pytest.raises(IncomparableScenarios):
        check_comparable([base, parse_config(list_config(keep_alive_s=10))])
    with pytest.raises(ConfigError):
        check_comparable([base])


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        parse_config(list_config(bogus=1))
    with pytest.raises(ConfigError):
        parse_config(list_config(node={"cores": 4, "gpus": 1}))
    with pytest.raises(ConfigError):
        parse_config(list_config(policy="nope"))
    with pytest.raises(ConfigError):
        parse_config("{not json")


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    bad = write(tmp_path, "bad.json", list_config(extra=True))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_relative_trace_path_resolves(tmp_path):
    (tmp_path / "t.csv").write_text("function_id,minute_index,invocations\nCR,0,3\n")
    cfg = {"policy": "CRIU", "workload": {"kind": "trace", "path": "t.csv"}}
    out = simulate(tmp_path, cfg)
    assert json.loads((out / "summary.json").read_text())["invocations"] == 3


def test_cost_command(tmp_path):
    prices = write(tmp_path, "p.json", {"p_in": 1e-6, "p_out": 4e-6})
    agents = write(tmp_path, "a.json", [{"id": "x", "name": "X", "framework": "f", "e2e_base_s": 3.2,
                                        "memory_mb": 74, "cpu_time_s": 0.4, "input_tokens": 1690,
                                        "output_tokens": 8, "browser_required": False, "allocated_gb": 2}])
    out = tmp_path / "cost"
    assert main(["cost", "--agents", str(agents), "--prices", str(prices), "--out", str(out)]) == 0
    (row,) = csv.DictReader(open(out / "cost.csv"))
    assert float(row["c_s"]) == pytest.approx(1.0688e-4)
    assert main(["cost", "--agents", str(tmp_path / "none.json"), "--prices", str(prices),
                 "--out", str(out)]) == 2


def test_summarize_excludes_warmup():
    rows = [{"type": "invocation", "function_id": "f", "warmup": w, "path": "warm", "e2e_ms": v,
             "startup_ms": 0.0, "exec_ms": v, "major_faults": 0, "cow_faults": 0}
            for w, v in [(True, 100.0), (False, 1.0), (False, 2.0)]]
    s = summarize(rows)
    assert s["invocations"] == 2 and s["overall"]["e2e_p99_ms"] == 2.0
    assert summarize(rows, include_warmup=True)["overall"]["e2e_p99_ms"] == 100.0
