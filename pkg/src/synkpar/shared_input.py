"""Input arrays readable by every worker context.

A :class:`SharedInputArray` owns one flat allocation of ``capacity`` elements
and exposes a row-major view of ``shape`` over its prefix.  Reshaping only
reinterprets the prefix, so an array can grow or shrink without reallocating
as long as it stays within capacity.
"""
from __future__ import annotations

import itertools
import logging
import os
import threading

import numpy as np

from . import tensor_core
from .errors import CapacityError, LifecycleError, ShapeError, UseAfterFreeError
from .tensor_core import RowRange
from .worker_engine import phase_in_flight

log = logging.getLogger(__name__)

_ids = itertools.count(1)
_live: dict[int, int] = {}
_live_lock = threading.Lock()


def live_allocations() -> dict[int, int]:
    """Snapshot of ``{id: nbytes}`` for arrays not yet freed."""
    with _live_lock:
        return dict(_live)


def _size(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


class SharedInputArray:
    def __init__(self, shape, dtype=np.float64, capacity: int | None = None):
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ShapeError(f"negative extent in {shape}")
        size = _size(shape)
        if capacity is not None and capacity < size:
            raise CapacityError(f"capacity {capacity} < size {size}")
        self.dtype = tensor_core.check_dtype(dtype)
        self.capacity = size if capacity is None else int(capacity)
        try:
            self._storage = np.zeros(self.capacity, dtype=self.dtype)
        except MemoryError as exc:
            raise MemoryError(f"cannot allocate {self.capacity} elements") from exc
        self._shape = shape
        self.freed = False
        self.id = next(_ids)
        with _live_lock:
            _live[self.id] = self._storage.nbytes
        log.debug("alloc shared input id=%d shape=%s capacity=%d", self.id, shape, self.capacity)

    def __repr__(self):
        state = "freed" if self.freed else f"shape={self._shape}"
        return f"SharedInputArray(id={self.id}, {state}, capacity={self.capacity})"

    def _check_live(self):
        if self.freed:
            raise UseAfterFreeError(f"shared input {self.id} was freed")

    @property
    def shape(self) -> tuple[int, ...]:
        self._check_live()
        return self._shape

    @property
    def size(self) -> int:
        return _size(self.shape)

    @property
    def array(self) -> np.ndarray:
        """The outward-facing view; writes through it land in shared storage."""
        self._check_live()
        return self._storage[:_size(self._shape)].reshape(self._shape)

    def __len__(self) -> int:
        shape = self.shape
        if not shape:
            raise TypeError("rank-0 shared input has no length")
        return shape[0]

    def __array__(self, dtype=None, copy=None):
        arr = self.array
        return arr if dtype is None else arr.astype(dtype)

    def write(self, rows: RowRange, values) -> None:
        self._check_live()
        if phase_in_flight():
            raise LifecycleError("cannot write a shared input while a parallel call is in flight")
        view = self.array
        if view.ndim < 1:
            raise ShapeError("rank-0 shared input cannot be written by rows")
        values = np.asarray(values)
        target = tensor_core.slice_rows(view, rows)
        if values.shape != target.shape:
            raise ShapeError(f"rows of shape {values.shape} do not fit {target.shape}")
        target[...] = values

    def read(self) -> np.ndarray:
        return self.array.copy()

    def reshape(self, new_shape) -> None:
        self._check_live()
        if phase_in_flight():
            raise LifecycleError("cannot reshape a shared input while a parallel call is in flight")
        new_shape = tuple(int(s) for s in new_shape)
        if any(s < 0 for s in new_shape):
            raise ShapeError(f"negative extent in {new_shape}")
        if _size(new_shape) > self.capacity:
            raise CapacityError(f"shape {new_shape} exceeds capacity {self.capacity}")
        self._shape = new_shape

    def free(self) -> None:
        self._check_live()
        self.freed = True
        self._storage = None
        with _live_lock:
            del _live[self.id]
        log.debug("free shared input id=%d", self.id)

    def store(self, path: str | os.PathLike) -> None:
        tensor_core.save(path, self.array)


def alloc(shape, dtype=np.float64, capacity_hint: int | None = None) -> SharedInputArray:
    """Zero-initialised shared input of ``shape`` with at least ``capacity_hint`` elements."""
    return SharedInputArray(shape, dtype, capacity_hint)


def from_array(values, capacity_hint: int | None = None) -> SharedInputArray:
    values = tensor_core.as_buffer(values)
    arr = SharedInputArray(values.shape, values.dtype, capacity_hint)
    arr.array[...] = values
    return arr


def load(path: str | os.PathLike, capacity_hint: int | None = None) -> SharedInputArray:
    return from_array(tensor_core.load(path), capacity_hint)
