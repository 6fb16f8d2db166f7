"""Per-rank replicated variables and MPI-style collectives over them.

Every collective runs as one or more pool phases.  Reductions use a fixed
binary tree: at level ``k`` rank ``r`` (with ``r % 2**(k+1) == 0``) folds in
rank ``r + 2**k``.  The order never changes, so floating-point results are
identical from run to run.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from . import tensor_core
from .errors import LifecycleError, ShapeError
from .shared_input import SharedInputArray
from .tensor_core import ReduceOp
from .worker_engine import PhaseCommand, PhaseKind, PoolState, WorkerPool, current_pool

_ids = itertools.count(1)


def _check_pool(pool: WorkerPool) -> None:
    if pool.state is PoolState.SHUT_DOWN:
        raise LifecycleError("pool is shut down")
    if pool.state is PoolState.IN_PHASE:
        raise LifecycleError("cannot touch replicas while a phase is in flight")


def _check_rank(pool: WorkerPool, rank: int) -> None:
    if not 0 <= rank < pool.world_size:
        raise ValueError(f"rank {rank} out of range for world size {pool.world_size}")


class ReplicatedVariable:
    """A value with one independent buffer per rank."""

    def __init__(self, pool: WorkerPool, init, name: str | None = None):
        _check_pool(pool)
        init = tensor_core.as_buffer(init)
        self.pool = pool
        self.id = next(_ids)
        self.name = name or f"var{self.id}"
        self.dtype = init.dtype
        self.replicas: list[np.ndarray] = [init.copy() for _ in pool.ranks]

    def __repr__(self):
        return f"ReplicatedVariable({self.name!r}, shape={self.replicas[0].shape}, world={len(self.replicas)})"

    def __hash__(self):
        return hash(self.id)

    def __eq__(self, other):
        return self is other

    def get_value(self, rank: int = 0) -> np.ndarray:
        _check_pool(self.pool)
        _check_rank(self.pool, rank)
        return self.replicas[rank].copy()

    def set_value(self, rank: int, value) -> None:
        _check_pool(self.pool)
        _check_rank(self.pool, rank)
        self.replicas[rank] = tensor_core.as_buffer(value, self.dtype).copy()

    def coherent(self) -> bool:
        """True if every replica is bitwise equal to rank 0's."""
        first = self.replicas[0]
        return all(r.shape == first.shape and r.tobytes() == first.tobytes()
                   for r in self.replicas[1:])


def register(init, pool: WorkerPool | None = None, name: str | None = None) -> ReplicatedVariable:
    return ReplicatedVariable(pool or current_pool(), init, name)


def _phase(pool: WorkerPool, name: str, task) -> list:
    return pool.run_phase(PhaseCommand(PhaseKind.COLLECTIVE, {"op": name}), task)


def tree_schedule(world_size: int) -> list[list[tuple[int, int]]]:
    """Pairs ``(dst, src)`` combined at each level of the reduction tree."""
    levels = []
    step = 1
    while step < world_size:
        levels.append([(r, r + step) for r in range(0, world_size, 2 * step) if r + step < world_size])
        step *= 2
    return levels


def _tree_reduce(var: ReplicatedVariable, op: ReduceOp, divide: bool = True) -> np.ndarray:
    if op is ReduceOp.GATHER:
        raise ValueError("use gather() for Gather")
    pool = var.pool
    shapes = {r.shape for r in var.replicas}
    if len(shapes) != 1:
        raise ShapeError(f"replica shapes differ: {sorted(shapes)}")
    fold = ReduceOp.SUM if op is ReduceOp.MEAN else op
    scratch: list[np.ndarray | None] = [None] * pool.world_size

    def copy_in(rank):
        scratch[rank] = var.replicas[rank].copy()

    _phase(pool, "reduce-copy", copy_in)
    for level in tree_schedule(pool.world_size):
        pairs = dict(level)

        def combine(rank, pairs=pairs):
            if rank in pairs:
                tensor_core.combine_inplace(scratch[rank], scratch[pairs[rank]], fold)

        _phase(pool, f"reduce-{fold.value}", combine)
    result = scratch[0]
    if op is ReduceOp.MEAN and divide:
        result /= result.dtype.type(pool.world_size)
    return result


def all_reduce(var: ReplicatedVariable, op: ReduceOp = ReduceOp.SUM) -> None:
    """Replace every replica with the reduction of all replicas.

    Mean gives every rank equal weight.
    """
    _check_pool(var.pool)
    if var.pool.world_size == 1:
        return
    total = _tree_reduce(var, op, divide=False)
    scale = total.dtype.type(var.pool.world_size) if op is ReduceOp.MEAN else None

    # Each rank writes only its own replica; the Mean division happens here so
    # it runs in parallel instead of on the master.
    def copy_out(rank):
        dst = var.replicas[rank]
        if scale is None:
            np.copyto(dst, total)
        else:
            np.divide(total, scale, out=dst)

    _phase(var.pool, "allreduce-bcast", copy_out)


def reduce(var: ReplicatedVariable, op: ReduceOp = ReduceOp.SUM, dst_rank: int = 0) -> None:
    """Fold all replicas into ``dst_rank``'s; the others are left unchanged."""
    _check_pool(var.pool)
    _check_rank(var.pool, dst_rank)
    var.replicas[dst_rank] = _tree_reduce(var, op)


def broadcast(var: ReplicatedVariable, src_rank: int = 0) -> None:
    _check_pool(var.pool)
    _check_rank(var.pool, src_rank)
    src = var.replicas[src_rank]

    def copy(rank):
        if rank != src_rank:
            var.replicas[rank] = src.copy()

    _phase(var.pool, "broadcast", copy)


def gather(var: ReplicatedVariable) -> np.ndarray:
    """Rank-ordered concatenation of the replicas, as a fresh buffer."""
    _check_pool(var.pool)
    return tensor_core.concat_rows(var.replicas).copy()


def scatter_value(var: ReplicatedVariable, data, indexes=None) -> None:
    """Split ``data`` (optionally row-selected first) by rows across the replicas.

    Each rank excerpts its own share during the phase.
    """
    pool = var.pool
    _check_pool(pool)
    src = data.array if isinstance(data, SharedInputArray) else tensor_core.as_buffer(data)
    if src.ndim < 1:
        raise ShapeError("scatter needs a buffer of rank >= 1")
    sel = tensor_core.normalize_indexes(indexes, src.shape[0])
    parts = tensor_core.partition_rows(tensor_core.selection_size(sel), pool.world_size)

    def excerpt(rank):
        rows = tensor_core.excerpt(src, sel, parts[rank])
        var.replicas[rank] = np.array(rows, dtype=var.dtype, copy=True)

    pool.run_phase(PhaseCommand(PhaseKind.SCATTER_VAR, {"var": var.id}), excerpt)


def check_coherent(variables: Sequence[ReplicatedVariable]) -> list[ReplicatedVariable]:
    """Variables whose replicas are not bitwise identical."""
    return [v for v in variables if not v.coherent()]
