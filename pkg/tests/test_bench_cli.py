import csv
import json

import numpy as np
import pytest

from synkpar import bench_cli
from synkpar.bench_cli import BenchConfig, emit_report, run_bench

SMALL = dict(width=16, layers=2, batch=8, steps=6, pin_cores=False)


def test_determinism():
    cfg = BenchConfig(workers=[1], seed=7, **{**SMALL, "steps": 10})
    a = run_bench(cfg).runs[0].losses
    b = run_bench(cfg).runs[0].losses
    assert len(a) == 10 and a == b


def test_scaled_and_fixed_batch():
    scaled = run_bench(BenchConfig(workers=[1, 3], batch_mode="scaled", **SMALL))
    assert [r.global_batch for r in scaled.runs] == [8, 24]
    fixed = run_bench(BenchConfig(workers=[1, 3], batch_mode="fixed", **SMALL))
    assert [r.global_batch for r in fixed.runs] == [8, 8]


def test_speedup_baselines_and_components():
    rep = run_bench(BenchConfig(workers=[1, 2, 4], **SMALL))
    by_w = {r.workers: r for r in rep.runs}
    assert by_w[1].speedup_vs_1 == 1.0
    assert by_w[2].speedup_vs_2 == 2.0
    for r in rep.runs:
        assert r.straggler_s >= 0
        assert r.function_s + r.shuffle_s + r.straggler_s + r.allreduce_s <= r.total_s
        assert r.coherent


def test_no_baseline_gives_none():
    rep = run_bench(BenchConfig(workers=[3], **SMALL))
    assert rep.runs[0].speedup_vs_1 is None and rep.runs[0].speedup_vs_2 is None


def test_ablation_replicas_diverge():
    rep = run_bench(BenchConfig(workers=[2], all_reduce=False, **SMALL))
    assert not rep.runs[0].coherent


@pytest.mark.parametrize("shuffle", [True, False])
def test_loss_independent_of_world(shuffle):
    # W workers with per-worker batch B take the same steps as 1 worker with batch W*B
    base = dict(SMALL, shuffle=shuffle, data_rows=96, steps=8)
    ref = run_bench(BenchConfig(workers=[1], batch=16, batch_mode="fixed", **{k: v for k, v in base.items() if k != "batch"}))
    par = run_bench(BenchConfig(workers=[2], batch_mode="scaled", **base))
    np.testing.assert_allclose(par.runs[0].losses, ref.runs[0].losses, rtol=1e-8)


def test_json_schema_roundtrip(tmp_path):
    path = tmp_path / "r.json"
    rep = run_bench(BenchConfig(workers=[1, 2], report=str(path), **SMALL))
    data = json.loads(path.read_text())
    assert set(data) >= {"config", "runs"}
    assert list(data["runs"][0])[:len(bench_cli.RUN_FIELDS)] == bench_cli.RUN_FIELDS
    assert data["runs"][0]["speedup_vs_1"] == 1.0
    assert data == json.loads(json.dumps(rep.to_dict()))


def test_csv_rows(tmp_path):
    rep = run_bench(BenchConfig(workers=[1, 2], **SMALL))
    path = emit_report(rep, tmp_path / "r.csv", "csv")
    rows = list(csv.DictReader(path.open()))
    assert [int(r["workers"]) for r in rows] == [1, 2]
    assert float(rows[0]["speedup_vs_1"]) == 1.0


def test_unwritable_report(tmp_path):
    rep = run_bench(BenchConfig(workers=[1], **SMALL))
    with pytest.raises(OSError):
        emit_report(rep, tmp_path / "missing" / "r.json")


def test_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(workers=[0])
    with pytest.raises(ValueError):
        BenchConfig(steps=0)
    with pytest.raises(ValueError):
        BenchConfig(batch_mode="huge")


def test_cli_main(tmp_path, capsys):
    out = tmp_path / "r.csv"
    code = bench_cli.main(["--workers", "1,2", "--steps", "3", "--batch", "4", "--width", "8",
                           "--layers", "2", "--shuffle", "off", "--all-reduce", "on",
                           "--slices", "2", "--seed", "3", "--report", str(out), "--format", "csv"])
    assert code == 0
    assert out.exists()
    assert "W=2" in capsys.readouterr().out


def test_cli_unwritable(tmp_path):
    code = bench_cli.main(["--workers", "1", "--steps", "1", "--width", "4", "--layers", "1",
                           "--report", str(tmp_path / "nope" / "r.json")])
    assert code == 1
