"""Dense row-major buffers and the row/shard operations built on them.

Buffers are plain C-contiguous ``numpy.ndarray`` objects restricted to
float32/float64.  The leading dimension always indexes independent data
points: it is the dimension that gets scattered, sliced and gathered.
"""
from __future__ import annotations

import enum
import io
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, NamedTuple, Sequence

import numpy as np

from .errors import (
    BoundsError,
    DegenerateWeightError,
    DTypeError,
    RankError,
    ShapeError,
    UnsupportedOpError,
)

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ReduceOp(enum.Enum):
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"
    MIN = "min"
    PROD = "prod"
    GATHER = "gather"


_UFUNCS = {
    ReduceOp.SUM: np.add,
    ReduceOp.MAX: np.maximum,
    ReduceOp.MIN: np.minimum,
    ReduceOp.PROD: np.multiply,
}


@dataclass(frozen=True)
class RowRange:
    """Half-open range of rows ``[start, stop)``."""

    start: int
    stop: int

    def __post_init__(self):
        if self.start < 0 or self.stop < self.start:
            raise BoundsError(f"invalid row range [{self.start}, {self.stop})")

    def __len__(self) -> int:
        return self.stop - self.start

    def as_slice(self) -> slice:
        return slice(self.start, self.stop)


def as_buffer(x, dtype=None) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float32/float64 array (no copy if already one)."""
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in SUPPORTED_DTYPES:
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        else:
            raise DTypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    # np.ascontiguousarray would promote rank-0 arrays to rank 1
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def check_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in SUPPORTED_DTYPES:
        raise DTypeError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


def _leading(buf: np.ndarray) -> int:
    if buf.ndim < 1:
        raise RankError("rank-0 buffer has no leading dimension")
    return buf.shape[0]


def slice_rows(buf: np.ndarray, rows: RowRange) -> np.ndarray:
    """Zero-copy view of rows ``[rows.start, rows.stop)``."""
    n = _leading(buf)
    if rows.stop > n:
        raise BoundsError(f"row range [{rows.start}, {rows.stop}) exceeds {n} rows")
    return buf[rows.start:rows.stop]


def gather_rows(buf: np.ndarray, indexes) -> np.ndarray:
    """Copy of the selected rows, in the given order (duplicates allowed)."""
    n = _leading(buf)
    idx = np.asarray(indexes, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise BoundsError(f"row index {bad} out of range for {n} rows")
    return np.take(buf, idx, axis=0)


def combine_inplace(acc: np.ndarray, other: np.ndarray, op: ReduceOp) -> None:
    """Elementwise ``acc = op(acc, other)`` for Sum/Max/Min/Prod."""
    if op not in _UFUNCS:
        raise UnsupportedOpError(f"{op.name} is not an elementwise combine")
    if acc.shape != other.shape:
        raise ShapeError(f"shape mismatch {acc.shape} vs {other.shape}")
    _UFUNCS[op](acc, other, out=acc)


def weighted_mean_inplace(acc: np.ndarray, acc_weight: float,
                          other: np.ndarray, other_weight: float) -> None:
    """Merge two weighted means into ``acc``.

    Written as ``acc + (other - acc) * w_other / (w_acc + w_other)`` so that
    merging equal values is exact.
    """
    if acc.shape != other.shape:
        raise ShapeError(f"shape mismatch {acc.shape} vs {other.shape}")
    if acc_weight < 0 or other_weight < 0:
        raise DegenerateWeightError("weights must be non-negative")
    total = acc_weight + other_weight
    if total == 0:
        raise DegenerateWeightError("both weights are zero")
    if other_weight == 0:
        return
    if acc_weight == 0:
        acc[...] = other
        return
    frac = other_weight / total
    acc += (other - acc) * acc.dtype.type(frac)


def concat_rows(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate along the leading dimension, in order."""
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    trailing = parts[0].shape[1:] if parts[0].ndim else None
    dtype = parts[0].dtype
    for p in parts:
        if p.ndim < 1:
            raise RankError("cannot concatenate rank-0 buffers")
        if p.shape[1:] != trailing:
            raise ShapeError(f"trailing dims differ: {p.shape[1:]} vs {trailing}")
        if p.dtype != dtype:
            raise DTypeError(f"dtype differs: {p.dtype} vs {dtype}")
    return np.concatenate(parts, axis=0)


def partition_rows(n_rows: int, n_parts: int) -> list[RowRange]:
    """Split ``n_rows`` into ``n_parts`` contiguous ranges differing by at most one row.

    The first ``n_rows % n_parts`` ranges get the extra row.
    """
    if n_parts < 1:
        raise ValueError("n_parts must be >= 1")
    if n_rows < 0:
        raise ValueError("n_rows must be >= 0")
    base, extra = divmod(n_rows, n_parts)
    out = []
    start = 0
    for i in range(n_parts):
        stop = start + base + (1 if i < extra else 0)
        out.append(RowRange(start, stop))
        start = stop
    return out


class Segment(NamedTuple):
    start: int
    stop: int
    shape: tuple[int, ...]


def flatten_concat(buffers: Sequence[np.ndarray]) -> tuple[np.ndarray, list[Segment]]:
    """Pack buffers into one rank-1 array plus the table needed to unpack it."""
    if not buffers:
        return np.empty(0, dtype=np.float64), []
    dtype = buffers[0].dtype
    if any(b.dtype != dtype for b in buffers):
        raise DTypeError("flatten_concat needs a single dtype")
    table = []
    offset = 0
    for b in buffers:
        table.append(Segment(offset, offset + b.size, tuple(b.shape)))
        offset += b.size
    flat = np.empty(offset, dtype=dtype)
    for b, seg in zip(buffers, table):
        flat[seg.start:seg.stop] = b.reshape(-1)
    return flat, table


def unflatten(flat: np.ndarray, table: Sequence[Segment]) -> list[np.ndarray]:
    """Views into ``flat``, one per segment."""
    if flat.ndim != 1:
        raise ShapeError("unflatten expects a rank-1 buffer")
    if table and table[-1].stop > flat.size:
        raise ShapeError("offset table exceeds flat buffer")
    return [flat[s.start:s.stop].reshape(s.shape) for s in table]


# SYNK binary tensor format: "SYNK", u8 version, u8 dtype code, u8 rank,
# one pad byte, rank x u64 LE extents, then LE row-major payload.
MAGIC = b"SYNK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sBBBx")


def write_tensor(f: BinaryIO, buf: np.ndarray) -> None:
    buf = as_buffer(buf)
    f.write(_HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[buf.dtype], buf.ndim))
    f.write(struct.pack(f"<{buf.ndim}Q", *buf.shape))
    f.write(buf.astype(buf.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    head = f.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated SYNK header")
    magic, version, code, rank = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported SYNK version {version}")
    if code not in _CODE_DTYPES:
        raise DTypeError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    payload = f.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ValueError("truncated SYNK payload")
    arr = np.frombuffer(payload, dtype=dtype, count=count).reshape(shape)
    return arr.astype(_CODE_DTYPES[code], copy=True)


def to_bytes(buf: np.ndarray) -> bytes:
    out = io.BytesIO()
    write_tensor(out, buf)
    return out.getvalue()


def from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save(path: str | os.PathLike, buf: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, buf)


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def normalize_indexes(indexes, n_rows: int) -> RowRange | np.ndarray:
    """Validate a row selection against ``n_rows``.

    ``None`` selects every row, a :class:`RowRange` or step-1 ``slice`` a
    contiguous block, anything else is treated as a list of row indexes.
    """
    if indexes is None:
        return RowRange(0, n_rows)
    if isinstance(indexes, slice):
        start, stop, step = indexes.indices(n_rows)
        if step != 1:
            return np.arange(start, stop, step, dtype=np.intp)
        indexes = RowRange(start, max(start, stop))
    if isinstance(indexes, RowRange):
        if indexes.stop > n_rows:
            raise BoundsError(f"row range [{indexes.start}, {indexes.stop}) exceeds {n_rows} rows")
        return indexes
    idx = np.asarray(indexes, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx[(idx < 0) | (idx >= n_rows)][0]
        raise BoundsError(f"row index {bad} out of range for {n_rows} rows")
    return idx


def selection_size(sel: RowRange | np.ndarray) -> int:
    return len(sel) if isinstance(sel, RowRange) else int(sel.size)


def excerpt(buf: np.ndarray, sel: RowRange | np.ndarray, part: RowRange) -> np.ndarray:
    """Rows ``part`` of the selection ``sel`` of ``buf``.

    Contiguous selections give a zero-copy view; index lists give a copy of
    only the requested share.
    """
    if isinstance(sel, RowRange):
        return slice_rows(buf, RowRange(sel.start + part.start, sel.start + part.stop))
    return gather_rows(buf, sel[part.start:part.stop])
