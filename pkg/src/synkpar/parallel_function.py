"""Parallel functions: scatter -> compute -> reduce/gather over the pool.

A kernel is an ordinary Python callable ``fn(ctx, *inputs)`` returning one
output or a tuple of outputs.  It may read replicated variables through
``ctx[var]`` (read-only, this rank's replica) and request updates with
``ctx.update(var, delta)``.  Updates are held back until every slice of the
call is done, then applied to the rank's own replica only.

Typical use::

    pool = synkpar.fork(4)
    f = synkpar.function(Kernel(col_sums), inputs=["scatter"], outputs=["sum"])
    synkpar.distribute()
    (total,) = f(x, num_slices=2)
"""
from __future__ import annotations

import enum
import inspect
import itertools
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import tensor_core
from .errors import (
    ArityError,
    EmptyFunctionError,
    EmptyReductionError,
    LifecycleError,
    ShapeError,
    SlicingConflictError,
)
from .replicated_vars import ReplicatedVariable
from .shared_input import SharedInputArray
from .tensor_core import ReduceOp, RowRange
from .worker_engine import PhaseCommand, PhaseKind, PoolState, WorkerPool, current_pool

_fn_ids = itertools.count(1)


class InputMode(enum.Enum):
    SCATTER = "scatter"
    BROADCAST = "broadcast"


class Combine(enum.Enum):
    """How a rank's update deltas are merged across slices and applied.

    ADD: replica += sum of deltas.
    WEIGHTED_MEAN_BY_ROWS: replica = row-weighted mean of the deltas.
    OVERWRITE: replica = delta (single slice only; may change shape).
    """

    ADD = "add"
    WEIGHTED_MEAN_BY_ROWS = "weighted_mean_by_rows"
    OVERWRITE = "overwrite"


@dataclass(frozen=True)
class InputSpec:
    mode: InputMode = InputMode.SCATTER


@dataclass(frozen=True)
class OutputSpec:
    reduce: ReduceOp = ReduceOp.SUM


@dataclass
class UpdateDelta:
    var: ReplicatedVariable
    delta: np.ndarray
    combine: Combine


@dataclass
class Kernel:
    fn: Callable[..., Any]
    arity: int | None = None
    reads: tuple[ReplicatedVariable, ...] = ()
    name: str | None = None

    def __post_init__(self):
        if self.arity is None:
            params = [p for p in inspect.signature(self.fn).parameters.values()
                      if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
            self.arity = max(len(params) - 1, 0)
        self.reads = tuple(self.reads)
        if self.name is None:
            self.name = getattr(self.fn, "__name__", "kernel")


@dataclass
class CallOptions:
    num_slices: int = 1
    indexes: Any = None


@dataclass
class CallReport:
    compute_s: list[float]
    excerpt_s: list[float]
    rank_s: list[float]
    reduce_s: float
    total_s: float
    rows: list[int]

    @property
    def function_s(self) -> float:
        return float(np.mean(self.compute_s))

    @property
    def shuffle_s(self) -> float:
        return float(np.mean(self.excerpt_s))

    @property
    def straggler_s(self) -> float:
        return max(self.rank_s) - float(np.mean(self.rank_s))


class KernelContext:
    """What a kernel sees on one rank for one slice."""

    def __init__(self, rank: int, world_size: int, n_rows: int,
                 reads: Mapping[ReplicatedVariable, np.ndarray],
                 updates: Mapping[ReplicatedVariable, Combine]):
        self.rank = rank
        self.world_size = world_size
        self.n_rows = n_rows
        self._reads = reads
        self._allowed = updates
        self.deltas: dict[ReplicatedVariable, UpdateDelta] = {}

    def __getitem__(self, var: ReplicatedVariable) -> np.ndarray:
        try:
            return self._reads[var]
        except KeyError:
            raise KeyError(f"{var!r} is not declared in the kernel's reads") from None

    def update(self, var: ReplicatedVariable, delta) -> None:
        if var not in self._allowed:
            raise KeyError(f"{var!r} is not declared as an update target")
        combine = self._allowed[var]
        delta = tensor_core.as_buffer(delta, var.dtype)
        prev = self.deltas.get(var)
        if prev is not None and combine is Combine.ADD:
            delta = prev.delta + delta
        self.deltas[var] = UpdateDelta(var, delta, combine)


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


def _as_input_mode(x) -> InputSpec:
    if isinstance(x, InputSpec):
        return x
    return InputSpec(InputMode(x.value if isinstance(x, InputMode) else x))


def _as_output_spec(x) -> OutputSpec:
    if isinstance(x, OutputSpec):
        return x
    return OutputSpec(ReduceOp(x.value if isinstance(x, ReduceOp) else x))


class _Accumulator:
    """In-place aggregation of one output across slices or ranks."""

    def __init__(self, op: ReduceOp):
        self.op = op
        self.value: np.ndarray | None = None
        self.weight = 0
        self.parts: list[np.ndarray] = []

    def add(self, out: np.ndarray, weight: int) -> None:
        if self.op is ReduceOp.GATHER:
            self.parts.append(out)
        elif self.value is None:
            self.value = np.array(out, copy=True)
            self.weight = weight
        elif self.op is ReduceOp.MEAN:
            tensor_core.weighted_mean_inplace(self.value, self.weight, out, weight)
            self.weight += weight
        else:
            tensor_core.combine_inplace(self.value, out, self.op)

    def merge(self, other: "_Accumulator") -> None:
        if self.op is ReduceOp.GATHER:
            self.parts.extend(other.parts)
        elif other.value is not None:
            self.add(other.value, other.weight)

    def result(self) -> np.ndarray:
        if self.op is ReduceOp.GATHER:
            return tensor_core.concat_rows(self.parts)
        if self.value is None:
            raise EmptyReductionError(f"{self.op.name} over zero contributing shards")
        return self.value


class _DeltaAccumulator:
    def __init__(self, combine: Combine):
        self.combine = combine
        self.value: np.ndarray | None = None
        self.weight = 0

    def add(self, delta: np.ndarray, rows: int) -> None:
        if self.value is None:
            self.value = np.array(delta, copy=True)
            self.weight = rows
        elif self.combine is Combine.ADD:
            self.value += delta
        elif self.combine is Combine.WEIGHTED_MEAN_BY_ROWS:
            tensor_core.weighted_mean_inplace(self.value, self.weight, delta, rows)
            self.weight += rows
        else:
            self.value = np.array(delta, copy=True)

    def apply(self, var: ReplicatedVariable, rank: int) -> None:
        current = var.replicas[rank]
        if self.combine is Combine.OVERWRITE:
            var.replicas[rank] = self.value
            return
        if self.value.shape != current.shape:
            raise ShapeError(f"delta shape {self.value.shape} != replica shape {current.shape}")
        if self.combine is Combine.ADD:
            current += self.value
        else:
            current[...] = self.value


@dataclass
class _RankResult:
    outputs: list[_Accumulator]
    rows: int
    ran: bool
    excerpt_s: float = 0.0
    compute_s: float = 0.0


@dataclass
class _Plan:
    """Everything the ranks need for one call, resolved on the master."""

    scatter: list[tuple[int, Any]]          # (arg position, source)
    broadcast: list[tuple[int, Any]]
    replica_backed: bool
    rank_sel: list[Any] = field(default_factory=list)     # per-rank row selection
    rank_parts: list[RowRange] = field(default_factory=list)
    rank_rows: list[int] = field(default_factory=list)


class ParallelFunction:
    def __init__(self, pool: WorkerPool, kernel: Kernel, inputs: Sequence, outputs: Sequence,
                 updates: Mapping[ReplicatedVariable, Combine] | None = None):
        self.pool = pool
        self.kernel = kernel
        self.inputs = [_as_input_mode(x) for x in inputs]
        self.outputs = [_as_output_spec(x) for x in outputs]
        self.updates = {v: Combine(c) for v, c in (updates or {}).items()}
        if len(self.inputs) != kernel.arity:
            raise ArityError(f"kernel {kernel.name!r} takes {kernel.arity} inputs, "
                             f"{len(self.inputs)} input specs given")
        if not self.outputs and not self.updates:
            raise EmptyFunctionError(f"kernel {kernel.name!r} has no outputs and no updates")
        self.id = next(_fn_ids)
        self.distributed = False
        self.last_report: CallReport | None = None

    def __repr__(self):
        return f"ParallelFunction({self.kernel.name!r}, id={self.id})"

    def __call__(self, *args, num_slices: int = 1, indexes=None) -> list[np.ndarray]:
        outputs, _ = self.call(args, CallOptions(num_slices, indexes))
        return outputs

    # -- planning -------------------------------------------------------

    def _plan(self, args: Sequence, opts: CallOptions) -> _Plan:
        pool = self.pool
        if pool.state is PoolState.SHUT_DOWN:
            raise LifecycleError("pool is shut down")
        if not self.distributed:
            raise LifecycleError(f"{self!r} has not been distributed")
        if len(args) != len(self.inputs):
            raise ArityError(f"{self!r} expects {len(self.inputs)} inputs, got {len(args)}")
        if opts.num_slices < 1:
            raise ValueError("num_slices must be >= 1")
        if opts.num_slices > 1 and any(c is Combine.OVERWRITE for c in self.updates.values()):
            raise SlicingConflictError("Overwrite updates cannot be accumulated across slices")

        scatter, broadcast = [], []
        for pos, (arg, spec) in enumerate(zip(args, self.inputs)):
            if isinstance(arg, SharedInputArray):
                arg = arg.array
            elif not isinstance(arg, ReplicatedVariable):
                arg = tensor_core.as_buffer(arg)
            if spec.mode is InputMode.SCATTER:
                if not isinstance(arg, ReplicatedVariable) and arg.ndim < 1:
                    raise ShapeError(f"scatter input {pos} has rank 0")
                scatter.append((pos, arg))
            else:
                broadcast.append((pos, arg))

        backed = [isinstance(a, ReplicatedVariable) for _, a in scatter]
        if any(backed) and not all(backed):
            raise ValueError("scatter inputs must be all explicit arrays or all replicated variables")
        plan = _Plan(scatter, broadcast, replica_backed=bool(scatter) and all(backed))
        W = pool.world_size

        if not scatter:
            plan.rank_rows = [1] * W
        elif plan.replica_backed:
            per_rank = _per_rank_indexes(opts.indexes, W)
            for rank in range(W):
                extents = {src.replicas[rank].shape[0] for _, src in scatter}
                if len(extents) != 1:
                    raise ShapeError(f"rank {rank} replica inputs have leading extents {sorted(extents)}")
                sel = tensor_core.normalize_indexes(per_rank[rank], extents.pop())
                plan.rank_sel.append(sel)
                n = tensor_core.selection_size(sel)
                plan.rank_parts.append(RowRange(0, n))
                plan.rank_rows.append(n)
        else:
            extents = {src.shape[0] for _, src in scatter}
            if len(extents) != 1:
                raise ShapeError(f"scatter inputs have different leading extents {sorted(extents)}")
            sel = tensor_core.normalize_indexes(opts.indexes, extents.pop())
            parts = tensor_core.partition_rows(tensor_core.selection_size(sel), W)
            plan.rank_sel = [sel] * W
            plan.rank_parts = parts
            plan.rank_rows = [len(p) for p in parts]
        return plan

    # -- execution ------------------------------------------------------

    def _compute(self, rank: int, kernel: Kernel, sources: list[tuple[int, np.ndarray]], sel,
                 share: RowRange | None, num_slices: int, broadcast: list[tuple[int, Any]],
                 updates: Mapping[ReplicatedVariable, Combine], run_empty: bool = False) -> _RankResult:
        """Run ``kernel`` over ``share`` of the selection, slice by slice.

        ``share`` is None for functions without scatter inputs (one call).
        """
        rows = 1 if share is None else len(share)
        result = _RankResult([_Accumulator(o.reduce) for o in self.outputs], rows, False)
        if share is None:
            subs: list[RowRange | None] = [None]
        else:
            subs = [RowRange(share.start + p.start, share.start + p.stop)
                    for p in tensor_core.partition_rows(len(share), num_slices) if len(p)]
            if not subs:
                if not run_empty:
                    return result
                subs = [share]
        reads = {v: _readonly(v.replicas[rank]) for v in kernel.reads}
        bcast = [(pos, _readonly(src.replicas[rank] if isinstance(src, ReplicatedVariable) else src))
                 for pos, src in broadcast]
        deltas = {v: _DeltaAccumulator(c) for v, c in updates.items()}
        for sub in subs:
            t0 = time.perf_counter()
            args: list[Any] = [None] * len(self.inputs)
            for pos, buf in sources:
                args[pos] = _readonly(tensor_core.excerpt(buf, sel, sub))
            for pos, arr in bcast:
                args[pos] = arr
            t1 = time.perf_counter()
            n = 0 if sub is None else len(sub)
            ctx = KernelContext(rank, self.pool.world_size, n, reads, updates)
            outs = _normalize_outputs(kernel.fn(ctx, *args), len(self.outputs), kernel.name)
            weight = 1 if sub is None else n
            for acc, out in zip(result.outputs, outs):
                acc.add(out, weight)
            for var, d in ctx.deltas.items():
                deltas[var].add(d.delta, weight)
            result.excerpt_s += t1 - t0
            result.compute_s += time.perf_counter() - t1
        t0 = time.perf_counter()
        for var, acc in deltas.items():
            if acc.value is not None:
                acc.apply(var, rank)
        result.compute_s += time.perf_counter() - t0
        result.ran = True
        return result

    def _rank_sources(self, plan: _Plan, rank: int) -> list[tuple[int, np.ndarray]]:
        if plan.replica_backed:
            return [(pos, src.replicas[rank]) for pos, src in plan.scatter]
        return plan.scatter

    def call(self, args: Sequence, opts: CallOptions | None = None) -> tuple[list[np.ndarray], CallReport]:
        """Run the function on every rank and combine the per-rank results."""
        opts = opts or CallOptions()
        t_start = time.perf_counter()
        plan = self._plan(args, opts)
        pool = self.pool
        W = pool.world_size
        if plan.scatter and sum(plan.rank_rows) == 0:
            if any(o.reduce is not ReduceOp.GATHER for o in self.outputs):
                raise EmptyReductionError("call over zero rows has no neutral element for its reductions")
            # Run once on rank 0 with the empty excerpt to get correctly shaped outputs.
            res = self._compute(0, self.kernel, self._rank_sources(plan, 0), plan.rank_sel[0],
                                RowRange(0, 0), 1, plan.broadcast, {}, run_empty=True)
            report = CallReport([0.0] * W, [0.0] * W, [0.0] * W, 0.0,
                                time.perf_counter() - t_start, [0] * W)
            self.last_report = report
            return [acc.result() for acc in res.outputs], report

        fid = self.id

        def task(rank):
            kernel = pool.rank_local[rank]["kernels"][fid]
            share = plan.rank_parts[rank] if plan.scatter else None
            sel = plan.rank_sel[rank] if plan.scatter else None
            return self._compute(rank, kernel, self._rank_sources(plan, rank), sel, share,
                                 opts.num_slices, plan.broadcast, self.updates)

        results = pool.run_phase(PhaseCommand(PhaseKind.CALL_FUNCTION, {"function": fid}), task)
        t_red = time.perf_counter()
        folded = [_Accumulator(o.reduce) for o in self.outputs]
        for res in results:
            if res.ran:
                for acc, part in zip(folded, res.outputs):
                    acc.merge(part)
        outputs = [acc.result() for acc in folded]
        t_end = time.perf_counter()
        report = CallReport(
            compute_s=[r.compute_s for r in results],
            excerpt_s=[r.excerpt_s for r in results],
            rank_s=list(pool.last_durations),
            reduce_s=t_end - t_red,
            total_s=t_end - t_start,
            rows=list(plan.rank_rows) if plan.scatter else [0] * W,
        )
        self.last_report = report
        return outputs, report

    def call_serial(self, args: Sequence, indexes=None) -> list[np.ndarray]:
        """Reference path: one kernel call over every effective row on rank 0.

        Updates land on rank 0's replicas only.
        """
        was = self.distributed
        self.distributed = True
        try:
            plan = self._plan(args, CallOptions(1, indexes))
        finally:
            self.distributed = was
        if not plan.scatter:
            res = self._compute(0, self.kernel, [], None, None, 1, plan.broadcast, self.updates)
            return [acc.result() for acc in res.outputs]
        n = sum(plan.rank_rows)
        if n == 0 and any(o.reduce is not ReduceOp.GATHER for o in self.outputs):
            raise EmptyReductionError("call over zero rows has no neutral element for its reductions")
        if plan.replica_backed:
            # Every rank's selected rows, in rank order.
            sources = []
            for pos, src in plan.scatter:
                pieces = [tensor_core.excerpt(src.replicas[r], plan.rank_sel[r], RowRange(0, k))
                          for r, k in enumerate(plan.rank_rows)]
                sources.append((pos, tensor_core.concat_rows(pieces)))
            sel = RowRange(0, n)
        else:
            sources, sel = plan.scatter, plan.rank_sel[0]
        res = self._compute(0, self.kernel, sources, sel, RowRange(0, n), 1, plan.broadcast,
                            self.updates, run_empty=True)
        return [acc.result() for acc in res.outputs]


def _per_rank_indexes(indexes, world_size: int) -> list:
    """Expand an index spec into one selection per rank.

    A list of per-rank lists applies a different selection on each rank;
    anything else is applied identically everywhere.
    """
    if indexes is None or isinstance(indexes, (slice, RowRange)):
        return [indexes] * world_size
    if isinstance(indexes, np.ndarray):
        if indexes.ndim == 1:
            return [indexes] * world_size
        indexes = list(indexes)
    items = list(indexes)
    if items and all(isinstance(i, (list, tuple, np.ndarray, slice, RowRange)) for i in items):
        if len(items) != world_size:
            raise ValueError(f"got {len(items)} per-rank index lists for world size {world_size}")
        return items
    return [items] * world_size


def _normalize_outputs(out, n_outputs: int, name: str) -> list[np.ndarray]:
    if n_outputs == 0:
        return []
    if n_outputs == 1 and not isinstance(out, (tuple, list)):
        out = (out,)
    if not isinstance(out, (tuple, list)) or len(out) != n_outputs:
        raise ArityError(f"kernel {name!r} must return {n_outputs} outputs")
    return [tensor_core.as_buffer(o) for o in out]


def function(kernel: Kernel | Callable, inputs: Sequence = (), outputs: Sequence = (),
             updates: Mapping[ReplicatedVariable, Combine] | None = None,
             pool: WorkerPool | None = None) -> ParallelFunction:
    """Declare a parallel function. It becomes callable after :func:`distribute`."""
    pool = pool or current_pool()
    if pool.state is PoolState.SHUT_DOWN:
        raise LifecycleError("pool is shut down")
    if not isinstance(kernel, Kernel):
        kernel = Kernel(kernel)
    f = ParallelFunction(pool, kernel, inputs, outputs, updates)
    pool.functions.append(f)
    return f


def distribute(pool: WorkerPool | None = None) -> list[int]:
    """Install every not-yet-distributed function on all ranks; returns their ids."""
    pool = pool or current_pool()
    pending = [f for f in pool.functions if not f.distributed]
    if not pending:
        return []

    def install(rank):
        table = pool.rank_local[rank].setdefault("kernels", {})
        for f in pending:
            table[f.id] = f.kernel

    pool.run_phase(PhaseCommand(PhaseKind.DISTRIBUTE, {"functions": [f.id for f in pending]}), install)
    for f in pending:
        f.distributed = True
    return [f.id for f in pending]
