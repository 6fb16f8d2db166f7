"""Synchronous data-parallel execution of numeric kernels over a worker pool."""
from .errors import *  # noqa: F401,F403
from .parallel_function import (
    CallOptions,
    CallReport,
    Combine,
    InputMode,
    InputSpec,
    Kernel,
    KernelContext,
    OutputSpec,
    ParallelFunction,
    UpdateDelta,
    distribute,
    function,
)
from .replicated_vars import (
    ReplicatedVariable,
    all_reduce,
    broadcast,
    gather,
    reduce,
    register,
    scatter_value,
)
from .shared_input import SharedInputArray, alloc, from_array
from .tensor_core import ReduceOp, RowRange, partition_rows
from .worker_engine import WorkerPool, current_pool, fork, shutdown

__version__ = "0.1.0"
