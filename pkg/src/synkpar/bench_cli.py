"""Scaling benchmark: synchronous SGD on a synthetic MLP over several world sizes.

Each run reports a profiling breakdown (function, shuffle, straggler,
all-reduce) and speedups against the 1-worker and 2-worker runs.

    synkpar-bench --workers 1,2,4 --steps 20 --batch 64 --batch-mode scaled \\
        --report out.json --format json
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models, shared_input
from .sync_sgd import SGD, Adam, FlatParamBlock, Momentum, RMSProp, SyncSGD
from .tensor_core import RowRange
from .worker_engine import WorkerPool

log = logging.getLogger(__name__)

RUN_FIELDS = ["workers", "total_s", "function_s", "shuffle_s", "straggler_s", "allreduce_s",
              "steps_per_s", "rows_per_s", "speedup_vs_1", "speedup_vs_2"]

_RULES = {"sgd": SGD, "momentum": Momentum, "rmsprop": RMSProp, "adam": Adam}


@dataclass
class BenchConfig:
    workers: list[int] = field(default_factory=lambda: [1, 2, 4])
    steps: int = 20
    batch: int = 64
    batch_mode: str = "scaled"      # "fixed" or "scaled"
    shuffle: bool = True
    all_reduce: bool = True
    num_slices: int = 1
    width: int = 512
    layers: int = 4
    seed: int = 0
    lr: float = 0.01
    optimizer: str = "sgd"
    data_rows: int | None = None
    pin_cores: bool = True
    report: str | None = None
    format: str = "json"

    def __post_init__(self):
        for name in ("steps", "batch", "num_slices", "width", "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.workers or any(w < 1 for w in self.workers):
            raise ValueError("workers must be a non-empty list of positive counts")
        if self.batch_mode not in ("fixed", "scaled"):
            raise ValueError("batch_mode must be 'fixed' or 'scaled'")
        if self.format not in ("json", "csv"):
            raise ValueError("format must be 'json' or 'csv'")
        if self.optimizer not in _RULES:
            raise ValueError(f"optimizer must be one of {sorted(_RULES)}")

    def global_batch(self, world_size: int) -> int:
        return self.batch * world_size if self.batch_mode == "scaled" else self.batch


@dataclass
class RunResult:
    workers: int
    total_s: float
    function_s: float
    shuffle_s: float
    straggler_s: float
    allreduce_s: float
    steps_per_s: float
    rows_per_s: float
    speedup_vs_1: float | None = None
    speedup_vs_2: float | None = None
    global_batch: int = 0
    coherent: bool = True
    losses: list[float] = field(default_factory=list)


@dataclass
class BenchReport:
    config: dict
    runs: list[RunResult]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config": self.config, "runs": [dataclasses.asdict(r) for r in self.runs],
                "meta": self.meta}


def _batches(cfg: BenchConfig, n_rows: int, global_batch: int):
    """Row selections for each step: contiguous slices, or shuffled index lists."""
    rng = np.random.default_rng(cfg.seed + 1)
    order = rng.permutation(n_rows) if cfg.shuffle else None
    pos = 0
    for _ in range(cfg.steps):
        if pos + global_batch > n_rows:
            pos = 0
            if cfg.shuffle:
                order = rng.permutation(n_rows)
        if cfg.shuffle:
            yield order[pos:pos + global_batch]
        else:
            yield RowRange(pos, pos + global_batch)
        pos += global_batch


def _limit_blas_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=1)


def run_one(cfg: BenchConfig, world_size: int, x, y) -> RunResult:
    n_rows = len(x)
    gb = cfg.global_batch(world_size)
    if gb > n_rows:
        raise ValueError(f"global batch {gb} exceeds dataset rows {n_rows}")
    sizes = [cfg.width] * (cfg.layers + 1)
    with WorkerPool(world_size, pin_cores=cfg.pin_cores) as pool:
        block = FlatParamBlock(models.init_mlp(sizes, seed=cfg.seed), pool=pool)
        trainer = SyncSGD(block, models.mlp_loss_and_grad, _RULES[cfg.optimizer](lr=cfg.lr),
                          all_reduce=cfg.all_reduce)
        losses = []
        t0 = time.perf_counter()
        for sel in _batches(cfg, n_rows, gb):
            losses.append(trainer.train_step(x, y, num_slices=cfg.num_slices, indexes=sel))
        total = time.perf_counter() - t0
        coherent = block.params.coherent()
    tm = trainer.timing
    return RunResult(
        workers=world_size, total_s=total, function_s=tm.function_s, shuffle_s=tm.shuffle_s,
        straggler_s=tm.straggler_s, allreduce_s=tm.allreduce_s,
        steps_per_s=cfg.steps / total, rows_per_s=cfg.steps * gb / total,
        global_batch=gb, coherent=coherent, losses=losses,
    )


def run_bench(cfg: BenchConfig) -> BenchReport:
    """Run every configured world size on the same seeded synthetic data."""
    largest = max(cfg.global_batch(w) for w in cfg.workers)
    n_rows = cfg.data_rows or 4 * largest
    x_np, y_np = models.make_regression_data(n_rows, cfg.width, cfg.width, seed=cfg.seed)
    x = shared_input.from_array(x_np)
    y = shared_input.from_array(y_np)
    limiter = _limit_blas_threads()
    try:
        runs = []
        for w in cfg.workers:
            run = run_one(cfg, w, x, y)
            log.info("workers=%d total=%.3fs rows/s=%.1f", w, run.total_s, run.rows_per_s)
            runs.append(run)
    finally:
        if limiter is not None:
            limiter.unregister()
        x.free()
        y.free()
    base1 = next((r for r in runs if r.workers == 1), None)
    base2 = next((r for r in runs if r.workers == 2), None)
    for r in runs:
        if base1 is not None:
            r.speedup_vs_1 = 1.0 if r is base1 else r.rows_per_s / base1.rows_per_s
        if base2 is not None:
            r.speedup_vs_2 = 2.0 if r is base2 else 2.0 * r.rows_per_s / base2.rows_per_s
    meta = {
        "cpu_count": os.cpu_count(),
        "data_rows": n_rows,
        "timing": "monotonic perf_counter; CPU work is synchronous, no launch-blocking analog needed",
        "straggler": "per call: slowest rank time minus mean rank time, summed",
    }
    report = BenchReport(dataclasses.asdict(cfg), runs, meta)
    if cfg.report:
        emit_report(report, cfg.report, cfg.format)
    return report


def emit_report(report: BenchReport, path: str | os.PathLike, fmt: str = "json") -> Path:
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2))
    elif fmt == "csv":
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(RUN_FIELDS + ["global_batch", "coherent"])
            for r in report.runs:
                row = dataclasses.asdict(r)
                writer.writerow([row[k] for k in RUN_FIELDS] + [r.global_batch, r.coherent])
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def _on_off(s: str) -> bool:
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return s == "on"


def _int_list(s: str) -> list[int]:
    try:
        return [int(p) for p in s.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad worker list {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synkpar-bench", description=__doc__.splitlines()[0])
    p.add_argument("--workers", type=_int_list, default=[1, 2, 4])
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--batch", type=int, default=64, help="per-worker batch (scaled) or global batch (fixed)")
    p.add_argument("--batch-mode", choices=["fixed", "scaled"], default="scaled")
    p.add_argument("--shuffle", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--all-reduce", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--slices", type=int, default=1)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--optimizer", choices=sorted(_RULES), default="sgd")
    p.add_argument("--report", default=None)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = BenchConfig(
        workers=args.workers, steps=args.steps, batch=args.batch, batch_mode=args.batch_mode,
        shuffle=args.shuffle, all_reduce=args.all_reduce, num_slices=args.slices,
        width=args.width, layers=args.layers, seed=args.seed, lr=args.lr,
        optimizer=args.optimizer, report=args.report, format=args.format,
    )
    try:
        report = run_bench(cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for r in report.runs:
        s1 = "-" if r.speedup_vs_1 is None else f"{r.speedup_vs_1:.2f}x"
        print(f"W={r.workers:<3d} total={r.total_s:8.3f}s fn={r.function_s:8.3f}s "
              f"shuffle={r.shuffle_s:7.3f}s straggler={r.straggler_s:7.3f}s "
              f"allreduce={r.allreduce_s:7.3f}s rows/s={r.rows_per_s:10.1f} speedup={s1}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
