import numpy as np
import pytest

import synkpar
from synkpar import shared_input
from synkpar.errors import CapacityError, LifecycleError, ShapeError, UseAfterFreeError
from synkpar.shared_input import alloc
from synkpar.tensor_core import RowRange


def test_alloc_examples():
    a = alloc((4, 2), np.float64, capacity_hint=64)
    assert a.shape == (4, 2) and a.capacity == 64
    assert np.all(a.array == 0)
    b = alloc((0, 3), np.float32)
    assert b.shape == (0, 3) and b.capacity == 0 and b.array.dtype == np.float32
    with pytest.raises(CapacityError):
        alloc((2,), capacity_hint=1)
    a.free()
    b.free()


def test_write_and_read_back():
    a = alloc((3, 2))
    data = np.arange(6.0).reshape(3, 2)
    a.write(RowRange(0, 3), data)
    np.testing.assert_array_equal(a.read(), data)
    a.write(RowRange(1, 2), [[9.0, 9.0]])
    np.testing.assert_array_equal(a.read(), [[0, 1], [9, 9], [4, 5]])
    with pytest.raises(ShapeError):
        a.write(RowRange(0, 1), np.zeros((1, 3)))
    a.free()
    with pytest.raises(UseAfterFreeError):
        a.write(RowRange(0, 1), np.zeros((1, 2)))


def test_reshape_within_capacity():
    a = alloc((4, 2), capacity_hint=64)
    a.write(RowRange(0, 4), np.arange(8.0).reshape(4, 2))
    storage = a._storage
    a.reshape((8, 2))
    assert a._storage is storage
    np.testing.assert_array_equal(a.array[:4], np.arange(8.0).reshape(4, 2))
    a.reshape((2, 4))
    np.testing.assert_array_equal(a.array, np.arange(8.0).reshape(2, 4))
    small = alloc((2, 4))
    with pytest.raises(CapacityError):
        small.reshape((3, 3))


def test_reshape_preserves_linear_prefix():
    a = alloc((6,), capacity_hint=10)
    a.write(RowRange(0, 6), np.arange(1.0, 7.0))
    a.reshape((2,))
    a.reshape((3, 3))
    np.testing.assert_array_equal(a.array.reshape(-1)[:6], np.arange(1.0, 7.0))


def test_free_twice_and_accounting():
    before = shared_input.live_allocations()
    arrays = [alloc((10, 3), capacity_hint=100) for _ in range(5)]
    during = shared_input.live_allocations()
    assert len(during) == len(before) + 5
    assert sum(during.values()) - sum(before.values()) == 5 * 100 * 8
    for a in arrays:
        a.free()
    assert shared_input.live_allocations() == before
    with pytest.raises(UseAfterFreeError):
        arrays[0].free()
    with pytest.raises(UseAfterFreeError):
        arrays[0].shape


def test_ids_not_reused():
    a = alloc((1,))
    a.free()
    b = alloc((1,))
    assert b.id > a.id


def test_store_load(tmp_path):
    a = shared_input.from_array(np.arange(6.0, dtype=np.float32).reshape(2, 3))
    a.store(tmp_path / "x.synk")
    b = shared_input.load(tmp_path / "x.synk", capacity_hint=20)
    np.testing.assert_array_equal(a.array, b.array)
    assert b.capacity == 20 and b.array.dtype == np.float32


def test_write_rejected_during_call(make_pool):
    pool = make_pool(2)
    arr = shared_input.from_array(np.zeros((4, 1)))
    seen = []

    def kernel(ctx, x):
        try:
            arr.write(RowRange(0, 1), np.ones((1, 1)))
        except LifecycleError:
            seen.append(ctx.rank)
        return x.sum(0)

    f = synkpar.function(kernel, ["scatter"], ["sum"], pool=pool)
    synkpar.distribute(pool)
    f(arr)
    assert sorted(seen) == [0, 1]
    arr.write(RowRange(0, 1), np.ones((1, 1)))


def test_write_then_parallel_read_coherent(make_pool):
    pool = make_pool(4)
    arr = alloc((16, 3))
    arr.write(RowRange(0, 16), np.arange(48.0).reshape(16, 3))
    f = synkpar.function(lambda ctx, x: x.copy(), ["broadcast"], ["gather"], pool=pool)
    synkpar.distribute(pool)
    out, = f(arr)
    np.testing.assert_array_equal(out, np.tile(np.arange(48.0).reshape(16, 3), (4, 1)))
