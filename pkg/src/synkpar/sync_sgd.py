"""Synchronous SGD over flattened parameter and gradient blocks.

One training step is three pool actions: a gradient function writes each
rank's shard-mean gradient into ``grads``, ``grads`` is all-reduced, and an
update function applies the optimizer rule on every rank.  Since every rank
runs the same deterministic rule on the same reduced gradient, parameter
replicas stay bitwise identical.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import replicated_vars, tensor_core
from .errors import CoherenceError, NumericError
from .parallel_function import CallOptions, Combine, Kernel, ParallelFunction, function, distribute
from .replicated_vars import ReplicatedVariable, register
from .tensor_core import ReduceOp
from .worker_engine import PhaseCommand, PhaseKind, WorkerPool, current_pool


class FlatParamBlock:
    """Named tensors packed into one replicated flat vector, plus a flat gradient."""

    def __init__(self, tensors: Mapping[str, np.ndarray], pool: WorkerPool | None = None,
                 dtype=np.float64):
        pool = pool or current_pool()
        self.names = list(tensors)
        bufs = [tensor_core.as_buffer(tensors[k], dtype) for k in self.names]
        flat, self.table = tensor_core.flatten_concat(bufs)
        self.pool = pool
        self.params = register(flat, pool, name="params")
        self.grads = register(np.zeros_like(flat), pool, name="grads")

    @property
    def size(self) -> int:
        return self.table[-1].stop if self.table else 0

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return dict(zip(self.names, tensor_core.unflatten(flat, self.table)))

    def flatten(self, tensors: Mapping[str, np.ndarray]) -> np.ndarray:
        flat, _ = tensor_core.flatten_concat(
            [np.asarray(tensors[k], dtype=self.params.dtype) for k in self.names])
        return flat

    def values(self, rank: int = 0) -> dict[str, np.ndarray]:
        return self.unflatten(self.params.get_value(rank))


# -- update rules ----------------------------------------------------------
#
# Every rule mutates ``params`` and its own auxiliary buffers in place.

@dataclass
class SGD:
    lr: float = 0.01
    aux_names = ()


@dataclass
class Momentum:
    """Nesterov momentum."""
    lr: float = 0.01
    momentum: float = 0.9
    aux_names = ("velocity",)


@dataclass
class RMSProp:
    lr: float = 0.001
    rho: float = 0.9
    eps: float = 1e-6
    aux_names = ("mean_square",)


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    aux_names = ("m", "v")


@dataclass
class OptimizerState:
    rule: SGD | Momentum | RMSProp | Adam
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, rule, size: int, dtype=np.float64) -> "OptimizerState":
        return cls(rule, {k: np.zeros(size, dtype=dtype) for k in rule.aux_names})


def step_sgd(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> None:
    params -= state.rule.lr * grads
    state.t += 1


def step_momentum(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> None:
    mu, lr = state.rule.momentum, state.rule.lr
    v = state.aux["velocity"]
    v *= mu
    v -= lr * grads
    params += mu * v - lr * grads
    state.t += 1


def step_rmsprop(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> None:
    rho, lr, eps = state.rule.rho, state.rule.lr, state.rule.eps
    a = state.aux["mean_square"]
    a *= rho
    a += (1 - rho) * grads * grads
    params -= lr * grads / np.sqrt(a + eps)
    state.t += 1


def step_adam(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> None:
    r = state.rule
    state.t += 1
    t = state.t
    m, v = state.aux["m"], state.aux["v"]
    m *= r.beta1
    m += (1 - r.beta1) * grads
    v *= r.beta2
    v += (1 - r.beta2) * grads * grads
    m_hat = m / (1 - r.beta1 ** t)
    v_hat = v / (1 - r.beta2 ** t)
    params -= r.lr * m_hat / (np.sqrt(v_hat) + r.eps)


_STEPS = {SGD: step_sgd, Momentum: step_momentum, RMSProp: step_rmsprop, Adam: step_adam}


def apply_rule(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> None:
    _STEPS[type(state.rule)](state, params, grads)


# -- training loop ---------------------------------------------------------

LossAndGrad = Callable[..., tuple[float, Mapping[str, np.ndarray]]]


@dataclass
class StepTiming:
    function_s: float = 0.0
    shuffle_s: float = 0.0
    straggler_s: float = 0.0
    allreduce_s: float = 0.0


class SyncSGD:
    """Synchronous data-parallel trainer.

    ``loss_and_grad(params, *inputs)`` gets the named parameter tensors and
    one slice of the batch, and returns the mean loss and mean gradients
    over that slice's rows.
    """

    def __init__(self, block: FlatParamBlock, loss_and_grad: LossAndGrad, rule, n_inputs: int = 2,
                 all_reduce: bool = True, grad_op: ReduceOp = ReduceOp.MEAN, debug: bool = False):
        self.block = block
        self.pool = block.pool
        self.rule = rule
        self.all_reduce = all_reduce
        self.grad_op = grad_op
        self.debug = debug
        size = block.size
        self.aux = {k: register(np.zeros(size, dtype=block.params.dtype), self.pool, name=k)
                    for k in rule.aux_names}
        self.t = register(np.zeros((), dtype=np.float64), self.pool, name="t")
        self.f_grad = self._build_grad(loss_and_grad, n_inputs)
        self.f_update = self._build_update()
        distribute(self.pool)
        self.timing = StepTiming()

    def _build_grad(self, loss_and_grad: LossAndGrad, n_inputs: int) -> ParallelFunction:
        block = self.block

        def grad_kernel(ctx, *inputs):
            loss, grads = loss_and_grad(block.unflatten(ctx[block.params]), *inputs)
            ctx.update(block.grads, block.flatten(grads))
            return np.asarray(loss, dtype=np.float64)

        kernel = Kernel(grad_kernel, arity=n_inputs, reads=(block.params,), name="grad")
        return function(kernel, ["scatter"] * n_inputs, ["mean"],
                        {block.grads: Combine.WEIGHTED_MEAN_BY_ROWS}, pool=self.pool)

    def _build_update(self) -> ParallelFunction:
        block, aux, t_var, rule = self.block, self.aux, self.t, self.rule
        reads = (block.params, block.grads, t_var, *aux.values())

        def update_kernel(ctx):
            state = OptimizerState(rule, {k: ctx[v].copy() for k, v in aux.items()}, int(ctx[t_var]))
            params = ctx[block.params].copy()
            apply_rule(state, params, ctx[block.grads])
            ctx.update(block.params, params)
            for k, v in aux.items():
                ctx.update(v, state.aux[k])
            ctx.update(t_var, np.asarray(float(state.t)))

        updates = {v: Combine.OVERWRITE for v in reads if v is not block.grads}
        return function(Kernel(update_kernel, arity=0, reads=reads, name="update"), [], [],
                        updates, pool=self.pool)

    def _rescale(self, rows: Sequence[int]) -> None:
        # Unequal shards: scale each shard mean by rows*W/total so an equal-weight
        # mean across ranks equals the global row mean.
        grads, W, total = self.block.grads, self.pool.world_size, sum(rows)

        def scale(rank):
            if rows[rank] == 0:
                grads.replicas[rank][...] = 0
            else:
                grads.replicas[rank] *= rows[rank] * W / total

        self.pool.run_phase(PhaseCommand(PhaseKind.COLLECTIVE, {"op": "rescale"}), scale)

    def train_step(self, *batch, num_slices: int = 1, indexes=None) -> float:
        """One synchronous step; returns the row-weighted mean loss of the batch."""
        (loss,), rep = self.f_grad.call(batch, CallOptions(num_slices, indexes))
        tm = self.timing
        tm.function_s += rep.function_s
        tm.shuffle_s += rep.shuffle_s
        tm.straggler_s += rep.straggler_s
        if self.debug:
            bad = [r for r, g in enumerate(self.block.grads.replicas) if not np.all(np.isfinite(g))]
            if bad:
                raise NumericError(f"non-finite gradient on ranks {bad}")
        if self.all_reduce:
            t0 = time.perf_counter()
            if len(set(rep.rows)) > 1 and self.grad_op is ReduceOp.MEAN:
                self._rescale(rep.rows)
            replicated_vars.all_reduce(self.block.grads, self.grad_op)
            tm.allreduce_s += time.perf_counter() - t0
        _, urep = self.f_update.call([])
        tm.function_s += urep.function_s
        tm.straggler_s += urep.straggler_s
        if self.debug and self.all_reduce:
            stale = replicated_vars.check_coherent([self.block.params, *self.aux.values()])
            if stale:
                raise CoherenceError(f"replicas diverged: {[v.name for v in stale]}")
        return float(loss)


def serial_train(params: Mapping[str, np.ndarray], loss_and_grad: LossAndGrad, rule,
                 batches, dtype=np.float64) -> list[dict[str, np.ndarray]]:
    """Plain single-context optimizer loop; the reference trajectory for tests.

    Returns the parameters after every step.
    """
    names = list(params)
    flat, table = tensor_core.flatten_concat([np.asarray(params[k], dtype) for k in names])
    state = OptimizerState.zeros(rule, flat.size, dtype)
    out = []
    for batch in batches:
        _, grads = loss_and_grad(dict(zip(names, tensor_core.unflatten(flat, table))), *batch)
        g, _ = tensor_core.flatten_concat([np.asarray(grads[k], dtype) for k in names])
        apply_rule(state, flat, g)
        out.append({k: v.copy() for k, v in zip(names, tensor_core.unflatten(flat, table))})
    return out
