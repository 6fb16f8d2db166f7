"""Worker pool with barrier-guarded phases.

The caller's thread is rank 0 and does the same per-rank work as the
``W - 1`` worker threads.  Every parallel action is a *phase*: all ranks meet
at an entry barrier, run their task, and meet again at an exit barrier before
the master returns.  Between the two barriers the master issues nothing else,
so user code never observes a half-finished phase.
"""
from __future__ import annotations

import enum
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import BarrierTimeout, LifecycleError, PhaseError

log = logging.getLogger(__name__)

ENV_WORKERS = "SYNKPAR_WORKERS"

_in_flight = 0
_in_flight_lock = threading.Lock()


def phase_in_flight() -> bool:
    """True while any pool is between the entry and exit barrier of a phase."""
    return _in_flight > 0


def _mark_in_flight(delta: int) -> None:
    global _in_flight
    with _in_flight_lock:
        _in_flight += delta


class PhaseKind(enum.Enum):
    CALL_FUNCTION = "call"
    COLLECTIVE = "collective"
    SCATTER_VAR = "scatter"
    DISTRIBUTE = "distribute"
    SHUTDOWN = "shutdown"


@dataclass(frozen=True)
class PhaseCommand:
    kind: PhaseKind
    payload: dict = field(default_factory=dict)


class PoolState(enum.Enum):
    IDLE = "idle"
    IN_PHASE = "in_phase"
    SHUT_DOWN = "shut_down"


def default_world_size() -> int:
    env = os.environ.get(ENV_WORKERS)
    if env:
        return int(env)
    return os.cpu_count() or 1


class WorkerPool:
    """``world_size`` execution contexts driven in lock-step by the master.

    ``jitter`` (seconds) makes every rank sleep a random amount before each
    barrier and task, which perturbs thread interleavings for race testing.
    ``barrier_timeout`` turns a stuck barrier into :class:`BarrierTimeout`
    instead of a hang.
    """

    def __init__(self, world_size: int, *, barrier_timeout: float | None = None,
                 jitter: float = 0.0, seed: int | None = None, pin_cores: bool = False):
        if world_size < 1:
            raise ValueError(f"world size must be >= 1, got {world_size}")
        self.world_size = world_size
        self.state = PoolState.IDLE
        self.phase_id = 0
        self.last_durations: list[float] = [0.0] * world_size
        # Per-rank scratch space owned by higher layers (kernel tables etc).
        self.rank_local: list[dict] = [{} for _ in range(world_size)]
        # Parallel functions built against this pool, in creation order.
        self.functions: list = []
        self._jitter = jitter
        self._rngs = [random.Random(None if seed is None else seed * 1_000_003 + r)
                      for r in range(world_size)]
        self._pin = pin_cores
        self._timeout = barrier_timeout
        self._barrier = threading.Barrier(world_size)
        self._command: PhaseCommand | None = None
        self._task: Callable[[int], Any] | None = None
        self._results: list[Any] = [None] * world_size
        self._errors: list[BaseException | None] = [None] * world_size
        self._durations = [0.0] * world_size
        self._threads = [
            threading.Thread(target=self._worker_loop, args=(r,), name=f"synk-rank-{r}", daemon=True)
            for r in range(1, world_size)
        ]
        for t in self._threads:
            t.start()

    @property
    def ranks(self) -> range:
        return range(self.world_size)

    def __repr__(self):
        return f"WorkerPool(world_size={self.world_size}, state={self.state.value})"

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()

    def _perturb(self, rank: int) -> None:
        if self._jitter:
            time.sleep(self._rngs[rank].uniform(0.0, self._jitter))

    def _wait(self, rank: int, timeout: float | None = None) -> None:
        self._perturb(rank)
        self._barrier.wait(timeout)

    def _execute(self, rank: int) -> None:
        self._perturb(rank)
        t0 = time.perf_counter()
        try:
            self._results[rank] = self._task(rank)
        except BaseException as exc:  # reported to the master, never swallowed
            self._errors[rank] = exc
        self._durations[rank] = time.perf_counter() - t0

    def _worker_loop(self, rank: int) -> None:
        if self._pin:
            _pin_to_core(rank)
        try:
            while True:
                # Idle workers may wait indefinitely for the next phase.
                self._wait(rank)
                if self._command.kind is PhaseKind.SHUTDOWN:
                    return
                self._execute(rank)
                self._wait(rank, self._timeout)
        except threading.BrokenBarrierError:
            return

    def run_phase(self, cmd: PhaseCommand, task: Callable[[int], Any]) -> list[Any]:
        """Run ``task(rank)`` on every rank and return the results in rank order."""
        if self.state is PoolState.SHUT_DOWN:
            raise LifecycleError("pool is shut down")
        if self.state is PoolState.IN_PHASE:
            raise LifecycleError("a phase is already in flight")
        if cmd.kind is PhaseKind.SHUTDOWN:
            raise LifecycleError("use shutdown() to stop the pool")
        self.state = PoolState.IN_PHASE
        self._command, self._task = cmd, task
        self._results = [None] * self.world_size
        self._errors = [None] * self.world_size
        _mark_in_flight(1)
        try:
            try:
                self._wait(0, self._timeout)
                self._execute(0)
                self._wait(0, self._timeout)
            except threading.BrokenBarrierError:
                self._abort()
                raise BarrierTimeout(f"barrier broken during phase {self.phase_id}") from None
        finally:
            _mark_in_flight(-1)
            self._task = None

        self.phase_id += 1
        self.last_durations = list(self._durations)
        if log.isEnabledFor(logging.DEBUG):
            log.debug("phase=%d kind=%s us=%s", self.phase_id, cmd.kind.value,
                      [round(d * 1e6) for d in self.last_durations])
        for rank, err in enumerate(self._errors):
            if err is not None:
                self.state = PoolState.IDLE
                self.shutdown()
                raise PhaseError(rank, err) from err
        self.state = PoolState.IDLE
        return self._results

    def _abort(self) -> None:
        global _session
        self.state = PoolState.SHUT_DOWN
        self._barrier.abort()
        for t in self._threads:
            t.join(timeout=1.0)
        if _session is self:
            _session = None

    def shutdown(self) -> None:
        """Join every worker. Safe to call more than once."""
        if self.state is PoolState.SHUT_DOWN:
            return
        self._command = PhaseCommand(PhaseKind.SHUTDOWN)
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            pass
        for t in self._threads:
            t.join()
        self.state = PoolState.SHUT_DOWN
        global _session
        if _session is self:
            _session = None


def _pin_to_core(rank: int) -> None:
    try:
        cores = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cores[rank % len(cores)]})
    except (AttributeError, OSError):
        pass


_session: WorkerPool | None = None


def fork(n_workers: int | None = None, **kwargs) -> WorkerPool:
    """Start the session pool. Defaults to ``$SYNKPAR_WORKERS`` or the CPU count."""
    global _session
    if _session is not None and _session.state is not PoolState.SHUT_DOWN:
        raise LifecycleError("already forked; call shutdown() first")
    world = default_world_size() if n_workers is None else n_workers
    if world < 1:
        raise ValueError(f"world size must be >= 1, got {world}")
    _session = WorkerPool(world, **kwargs)
    return _session


def current_pool() -> WorkerPool:
    if _session is None or _session.state is PoolState.SHUT_DOWN:
        raise LifecycleError("no active pool; call fork() first")
    return _session


def shutdown() -> None:
    if _session is not None:
        _session.shutdown()
