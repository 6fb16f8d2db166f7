import statistics

import numpy as np
import pytest

import synkpar
from synkpar import Combine, Kernel, ReduceOp
from synkpar.errors import (
    ArityError,
    BoundsError,
    EmptyFunctionError,
    EmptyReductionError,
    LifecycleError,
    PhaseError,
    ShapeError,
    SlicingConflictError,
)
from synkpar.replicated_vars import register, scatter_value
from synkpar.tensor_core import RowRange, partition_rows

X6 = np.array([[1, 0], [1, 0], [1, 0], [0, 1], [0, 1], [0, 1]], dtype=float)


def col_sums(ctx, x):
    return x.sum(axis=0)


def build(pool, kernel, inputs, outputs, updates=None):
    f = synkpar.function(kernel, inputs, outputs, updates, pool=pool)
    synkpar.distribute(pool)
    return f


def test_column_sum_example(make_pool):
    f = build(make_pool(3), col_sums, ["scatter"], ["sum"])
    out, report = f.call([X6])
    np.testing.assert_array_equal(out[0], [3, 3])
    assert report.rows == [2, 2, 2]
    for s in (1, 2, 3):
        np.testing.assert_array_equal(f(X6, num_slices=s)[0], [3, 3])


def test_identity_gather_with_reverse_indexes(make_pool):
    f = build(make_pool(3), lambda ctx, x: x, ["scatter"], ["gather"])
    out, = f(X6, indexes=[5, 4, 3, 2, 1, 0])
    np.testing.assert_array_equal(out, X6[::-1])


def test_mean_weighted_by_shard_rows(make_pool):
    x = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]])
    f = build(make_pool(2), lambda ctx, x: x.mean(axis=0), ["scatter"], ["mean"])
    out, report = f.call([x])
    assert report.rows == [3, 2]
    oracle = statistics.fmean([1, 2, 3, 4, 5])
    assert out[0][0] == oracle == 3.0


def test_add_update_is_rank_local(make_pool, rng):
    pool = make_pool(2)
    acc = register(np.zeros(3), pool)
    acc.set_value(1, [10.0, 10.0, 10.0])

    def kernel(ctx, x):
        ctx.update(acc, x.sum(axis=0))
        return x.sum(axis=0)

    f = build(pool, Kernel(kernel, reads=(acc,)), ["scatter"], ["sum"], {acc: Combine.ADD})
    x = rng.standard_normal((7, 3))
    before = [acc.get_value(r) for r in range(2)]
    f(x, num_slices=2)
    for r, share in enumerate(partition_rows(7, 2)):
        expected = before[r] + x[share.start:share.stop].sum(axis=0)
        np.testing.assert_allclose(acc.get_value(r), expected, rtol=1e-12)


def test_updates_see_pre_call_values(make_pool):
    pool = make_pool(2)
    v = register(np.array([1.0]), pool)

    def kernel(ctx, x):
        ctx.update(v, ctx[v] * x.shape[0])
        return ctx[v].copy()

    f = build(pool, Kernel(kernel, reads=(v,)), ["scatter"], ["max"], {v: Combine.ADD})
    out, = f(np.zeros((8, 1)), num_slices=4)
    assert out[0] == 1.0
    # each rank: 4 rows in 4 slices, every slice read the original 1.0
    assert [v.get_value(r)[0] for r in range(2)] == [5.0, 5.0]


def test_replicas_are_read_only_in_kernels(make_pool):
    pool = make_pool(2)
    v = register(np.zeros(2), pool)

    def kernel(ctx, x):
        ctx[v][0] = 1.0
        return x.sum(0)

    f = build(pool, Kernel(kernel, reads=(v,)), ["scatter"], ["sum"])
    with pytest.raises(PhaseError) as info:
        f(np.ones((4, 2)))
    assert isinstance(info.value.cause, ValueError)


def test_lifecycle_and_arity_errors(make_pool):
    pool = make_pool(2)
    f = synkpar.function(col_sums, ["scatter"], ["sum"], pool=pool)
    with pytest.raises(LifecycleError):
        f(X6)
    with pytest.raises(ArityError):
        synkpar.function(Kernel(lambda ctx, a, b: a, arity=2), ["scatter"], ["sum"], pool=pool)
    with pytest.raises(EmptyFunctionError):
        synkpar.function(col_sums, ["scatter"], [], pool=pool)
    synkpar.distribute(pool)
    with pytest.raises(ArityError):
        f(X6, X6)


def test_distribute_incremental(make_pool):
    pool = make_pool(2)
    assert synkpar.distribute(pool) == []
    f1 = synkpar.function(col_sums, ["scatter"], ["sum"], pool=pool)
    f2 = synkpar.function(col_sums, ["scatter"], ["max"], pool=pool)
    assert synkpar.distribute(pool) == [f1.id, f2.id]
    f3 = synkpar.function(col_sums, ["scatter"], ["min"], pool=pool)
    assert synkpar.distribute(pool) == [f3.id]
    assert all(set(pool.rank_local[r]["kernels"]) == {f1.id, f2.id, f3.id} for r in range(2))
    for f in (f1, f2, f3):
        f(X6)


def test_call_errors(make_pool):
    pool = make_pool(2)
    acc = register(np.zeros(2), pool)

    def overwrite(ctx, x):
        ctx.update(acc, x.sum(0))
        return x.sum(0)

    f = build(pool, lambda ctx, a, b: a.sum(0) + b.sum(0), ["scatter", "scatter"], ["sum"])
    with pytest.raises(ShapeError):
        f(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(BoundsError):
        f(np.zeros((3, 2)), np.zeros((3, 2)), indexes=[0, 3])
    g = build(pool, overwrite, ["scatter"], ["sum"], {acc: Combine.OVERWRITE})
    with pytest.raises(SlicingConflictError):
        g(np.zeros((4, 2)), num_slices=2)
    g(np.ones((4, 2)))
    np.testing.assert_array_equal(acc.get_value(0), [2, 2])


def test_kernel_failure_is_fail_stop(make_pool):
    pool = make_pool(3)

    def kernel(ctx, x):
        if ctx.rank == 1:
            raise ArithmeticError("bad shard")
        return x.sum(0)

    f = build(pool, kernel, ["scatter"], ["sum"])
    with pytest.raises(PhaseError) as info:
        f(X6)
    assert info.value.rank == 1
    with pytest.raises(LifecycleError):
        f(X6)


def test_empty_input(make_pool):
    pool = make_pool(3)
    f = build(pool, col_sums, ["scatter"], ["sum"])
    g = build(pool, lambda ctx, x: x * 2, ["scatter"], ["gather"])
    empty = np.zeros((0, 2))
    with pytest.raises(EmptyReductionError):
        f(empty)
    with pytest.raises(EmptyReductionError):
        f.call_serial([empty])
    out, = g(empty)
    assert out.shape == (0, 2)
    assert g.call_serial([empty])[0].shape == (0, 2)


def test_more_ranks_than_rows(make_pool):
    pool = make_pool(8)
    calls = []

    def kernel(ctx, x):
        calls.append(ctx.rank)
        return x.max(axis=0)

    f = build(pool, kernel, ["scatter"], ["max"])
    out, report = f.call([np.array([[1.0], [7.0], [3.0]])])
    assert out[0][0] == 7.0
    assert sorted(calls) == [0, 1, 2]
    assert report.rows == [1, 1, 1, 0, 0, 0, 0, 0]


def test_broadcast_input_not_copied(make_pool):
    pool = make_pool(3)
    w = np.arange(4.0).reshape(2, 2)
    ptrs = []

    def kernel(ctx, x, w):
        ptrs.append(w.__array_interface__["data"][0])
        return x @ w

    f = build(pool, kernel, ["scatter", "broadcast"], ["gather"])
    out, = f(X6, w)
    np.testing.assert_array_equal(out, X6 @ w)
    assert set(ptrs) == {w.__array_interface__["data"][0]}


def test_shared_input_argument(make_pool):
    pool = make_pool(2)
    arr = synkpar.alloc((6, 2), capacity_hint=40)
    arr.write(RowRange(0, 6), X6)
    f = build(pool, col_sums, ["scatter"], ["sum"])
    np.testing.assert_array_equal(f(arr)[0], [3, 3])
    arr.reshape((4, 2))
    np.testing.assert_array_equal(f(arr)[0], [3, 1])


def test_no_scatter_inputs(make_pool):
    pool = make_pool(3)
    v = register(np.array([2.0]), pool)
    v.set_value(2, [5.0])
    f = build(pool, Kernel(lambda ctx: ctx[v] * 1.0, arity=0, reads=(v,)), [], ["mean"])
    out, = f()
    np.testing.assert_allclose(out, [3.0])


def test_replica_backed_input_slicing(make_pool, rng):
    pool = make_pool(3)
    data = rng.standard_normal((11, 2))
    stored = register(np.zeros((0, 2)), pool)
    scatter_value(stored, data)
    f = build(pool, lambda ctx, x: x, ["scatter"], ["gather"])
    sums = build(pool, col_sums, ["scatter"], ["sum"])
    for s in (1, 2, 3):
        np.testing.assert_array_equal(f(stored, num_slices=s)[0], data)
        np.testing.assert_allclose(sums(stored, num_slices=s)[0], data.sum(0), rtol=1e-12)
    # same local indexes on every rank: first row of each shard
    out, = f(stored, indexes=[0])
    np.testing.assert_array_equal(out, data[[0, 4, 8]])
    # different indexes per rank, unequal lengths
    (out,), report = f.call([stored], synkpar.CallOptions(2, [[1, 0], [2], []]))
    np.testing.assert_array_equal(out, data[[1, 0, 6]])
    assert report.rows == [2, 1, 0]
    assert np.array_equal(f.call_serial([stored], [[1, 0], [2], []])[0], out)


def test_replica_backed_mean_weights_unequal_lists(make_pool):
    pool = make_pool(2)
    stored = register(np.zeros((0, 1)), pool)
    scatter_value(stored, np.array([[1.0], [2.0], [3.0], [4.0]]))
    f = build(pool, lambda ctx, x: x.mean(axis=0), ["scatter"], ["mean"])
    out, = f(stored, indexes=[[0, 1], [1]])
    # rows {1, 2} on rank 0 and {4} on rank 1
    assert out[0] == pytest.approx(7.0 / 3.0, rel=1e-15)


def test_mixed_explicit_and_replica_scatter_rejected(make_pool):
    pool = make_pool(2)
    stored = register(np.zeros((2, 2)), pool)
    f = build(pool, lambda ctx, a, b: a.sum(0), ["scatter", "scatter"], ["sum"])
    with pytest.raises(ValueError):
        f(stored, np.zeros((2, 2)))


def test_undeclared_update_target(make_pool):
    pool = make_pool(2)
    v = register(np.zeros(1), pool)
    f = build(pool, lambda ctx, x: ctx.update(v, [1.0]) or x.sum(0), ["scatter"], ["sum"])
    with pytest.raises(PhaseError):
        f(X6)


def test_call_serial_updates_rank0_only(make_pool):
    pool = make_pool(3)
    acc = register(np.zeros(2), pool)

    def kernel(ctx, x):
        ctx.update(acc, x.sum(0))
        return x.sum(0)

    f = build(pool, kernel, ["scatter"], ["sum"], {acc: Combine.ADD})
    f.call_serial([X6])
    np.testing.assert_array_equal(acc.get_value(0), [3, 3])
    np.testing.assert_array_equal(acc.get_value(1), [0, 0])


def test_weighted_mean_update_slicing_invariant(make_pool, rng):
    pool = make_pool(2)
    v = register(np.zeros(3), pool)

    def kernel(ctx, x):
        ctx.update(v, x.mean(axis=0))
        return x.mean(axis=0)

    f = build(pool, kernel, ["scatter"], ["mean"], {v: Combine.WEIGHTED_MEAN_BY_ROWS})
    x = rng.standard_normal((9, 3))
    f(x)
    ref = [v.get_value(r) for r in range(2)]
    for s in (2, 3, 5):
        f(x, num_slices=s)
        for r in range(2):
            np.testing.assert_allclose(v.get_value(r), ref[r], rtol=1e-12)
    shares = partition_rows(9, 2)
    for r, sh in enumerate(shares):
        np.testing.assert_allclose(ref[r], x[sh.start:sh.stop].mean(0), rtol=1e-12)


def test_report_components(make_pool):
    pool = make_pool(4)
    f = build(pool, col_sums, ["scatter"], ["sum"])
    _, rep = f.call([np.ones((40, 8))], synkpar.CallOptions(indexes=np.arange(40)[::-1]))
    assert len(rep.compute_s) == len(rep.rank_s) == 4
    assert rep.straggler_s >= 0
    assert rep.function_s + rep.shuffle_s <= max(rep.rank_s) + 1e-9
    assert rep.total_s >= rep.reduce_s
