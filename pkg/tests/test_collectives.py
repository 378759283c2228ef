import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from minidist.collectives import (
    ALGORITHMS,
    GradientBuffer,
    VarPayload,
    allreduce,
    allreduce_multicolor,
    allreduce_ring,
    alltoallv,
    elementwise_add,
    make_segment_schedule,
    reduce_then_broadcast,
)
from minidist.errors import InvalidConfig, LengthMismatch, OffsetOverflow
from minidist.topology import build_multicolor_trees, build_ring
from minidist.transport import run_ranks
from oracles import (
    f64_sum,
    max_rel_err,
    rand_arrays,
    rank_order_sum,
    ring_fold_sum,
    tree_fold_sum,
)


# -- buffers and schedules -----------------------------------------------------


def test_gradient_buffer_constructors():
    assert GradientBuffer.zeros(5).data.tolist() == [0.0] * 5
    b = GradientBuffer.of([1, 2, 3])
    assert b.data.dtype == np.float32 and b.len == 3
    a = GradientBuffer.alloc(1024)
    assert a.data.dtype == np.float32 and a.len == 1024
    a.data[:] = 7.0
    assert float(a.data.sum()) == 7.0 * 1024


def test_gradient_buffer_rejects_bad_arrays():
    with pytest.raises(InvalidConfig):
        GradientBuffer(np.zeros(4, dtype=np.float64))
    with pytest.raises(InvalidConfig):
        GradientBuffer(np.zeros((2, 2), dtype=np.float32))
    # strided input is accepted by copying it contiguous
    b = GradientBuffer(np.arange(8, dtype=np.float32)[::2])
    assert b.data.flags.c_contiguous and b.data.tolist() == [0.0, 2.0, 4.0, 6.0]


def test_elementwise_add():
    a = GradientBuffer.of([1, 2])
    elementwise_add(a, GradientBuffer.of([10, 20]))
    assert a.data.tolist() == [11.0, 22.0]
    with pytest.raises(LengthMismatch):
        elementwise_add(a, GradientBuffer.zeros(3))


@given(st.integers(0, 5000), st.integers(1, 8), st.sampled_from([1, 7, 64, 16384]))
def test_segment_schedule_covers_every_chunk(payload_len, k, segment_elems):
    sched = make_segment_schedule(payload_len, k, segment_elems)
    assert sched.segment_elems == segment_elems
    assert len(sched.per_color) == k
    covered = 0
    for segs in sched.per_color:
        for lo, hi in segs:
            assert 0 < hi - lo <= segment_elems
            covered += hi - lo
        # contiguous within the color
        for (a_lo, a_hi), (b_lo, _) in zip(segs, segs[1:]):
            assert a_hi == b_lo
    assert covered == payload_len


def test_segment_schedule_rejects_absurd_segment_counts():
    # one-element segments on a 4 Mi payload would exhaust the tag space
    with pytest.raises(InvalidConfig):
        make_segment_schedule(1 << 22, 1, 1)
    with pytest.raises(InvalidConfig):
        make_segment_schedule(100, 1, 0)


# -- allreduce: exact values and order-matched serial folds --------------------


def test_two_ranks_one_color():
    ts = build_multicolor_trees(2, k=1, arity=4)
    res = run_ranks(
        2,
        "sim",
        lambda ep: allreduce_multicolor(
            ep, GradientBuffer.of([1, 2] if ep.rank == 0 else [10, 20]), ts
        ).data.tolist(),
    ).results
    assert res == [[11.0, 22.0], [11.0, 22.0]]


def test_constant_inputs_sum_to_rank_total():
    ts = build_multicolor_trees(8, k=4, arity=4)
    res = run_ranks(
        8,
        "sim",
        lambda ep: allreduce_multicolor(
            ep, GradientBuffer(np.full(10, ep.rank, np.float32)), ts
        ).data,
    ).results
    assert all((r == 28).all() for r in res)


@pytest.mark.parametrize("n,length", [(8, 1000), (8, 997), (4, 7), (3, 1), (2, 0), (16, 250)])
def test_multicolor_matches_child_order_fold(n, length):
    rng = np.random.default_rng(7000 + n * 17 + length)
    arrays = rand_arrays(rng, n, length)
    ts = build_multicolor_trees(n, k=min(4, n), arity=4)
    want = tree_fold_sum(ts, arrays)
    for backend in ("sim", "threads"):
        res = run_ranks(
            n,
            backend,
            lambda ep: allreduce_multicolor(
                ep, GradientBuffer(arrays[ep.rank].copy()), ts, segment_elems=64
            ).data,
        ).results
        for r in res:
            assert np.array_equal(r, want), backend


def test_segmentation_does_not_change_results():
    # per-element accumulation order is segment-independent
    rng = np.random.default_rng(11)
    arrays = rand_arrays(rng, 8, 1003)
    ts = build_multicolor_trees(8, k=4, arity=4)
    outs = []
    for seg in (1, 17, 250, 16384):
        res = run_ranks(
            8,
            "sim",
            lambda ep: allreduce_multicolor(
                ep, GradientBuffer(arrays[ep.rank].copy()), ts, segment_elems=seg
            ).data,
        ).results
        outs.append(res[0])
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])


def test_default_tree_set_is_built_on_demand():
    res = run_ranks(
        8,
        "sim",
        lambda ep: allreduce_multicolor(
            ep, GradientBuffer(np.ones(16, np.float32))
        ).data,
    ).results
    assert all((r == 8).all() for r in res)


@pytest.mark.parametrize("n,length", [(8, 1000), (5, 333), (2, 4)])
def test_ring_matches_hop_order_fold(n, length):
    rng = np.random.default_rng(3000 + n + length)
    arrays = rand_arrays(rng, n, length)
    ring = build_ring(n)
    want = ring_fold_sum(ring.order, arrays)
    for backend in ("sim", "threads"):
        res = run_ranks(
            n,
            backend,
            lambda ep: allreduce_ring(
                ep, GradientBuffer(arrays[ep.rank].copy()), ring, segment_elems=100
            ).data,
        ).results
        for r in res:
            assert np.array_equal(r, want), backend


def test_ring_small_exact():
    res = run_ranks(
        3,
        "sim",
        lambda ep: allreduce_ring(ep, GradientBuffer.of([ep.rank + 1.0])).data.tolist(),
    ).results
    assert res == [[6.0]] * 3


def test_reduce_bcast_matches_rank_order_fold():
    rng = np.random.default_rng(12)
    arrays = rand_arrays(rng, 8, 513)
    want = rank_order_sum(arrays)
    for backend in ("sim", "threads"):
        res = run_ranks(
            8,
            backend,
            lambda ep: reduce_then_broadcast(ep, GradientBuffer(arrays[ep.rank].copy())).data,
        ).results
        for r in res:
            assert np.array_equal(r, want), backend


def test_reduce_bcast_nonzero_root():
    rng = np.random.default_rng(13)
    arrays = rand_arrays(rng, 4, 100)
    want = rank_order_sum(arrays)
    res = run_ranks(
        4,
        "sim",
        lambda ep: reduce_then_broadcast(ep, GradientBuffer(arrays[ep.rank].copy()), root=2).data,
    ).results
    for r in res:
        assert np.array_equal(r, want)


def test_one_rank_is_identity():
    for algo in ALGORITHMS:
        res = run_ranks(
            1, "sim", lambda ep: allreduce(ep, GradientBuffer.of([3.5, 4.5]), algo).data.tolist()
        ).results
        assert res == [[3.5, 4.5]], algo


def test_algorithms_agree_within_float_noise():
    rng = np.random.default_rng(14)
    arrays = rand_arrays(rng, 8, 2000)
    want = f64_sum(arrays)
    for algo in ALGORITHMS:
        res = run_ranks(
            8,
            "sim",
            lambda ep: allreduce(ep, GradientBuffer(arrays[ep.rank].copy()), algo).data,
        ).results
        assert max_rel_err(res[0], want) <= 1e-5, algo


def test_dispatcher_rejects_unknown_algorithm():
    def prog(ep):
        with pytest.raises(InvalidConfig):
            allreduce(ep, GradientBuffer.zeros(4), "butterfly")

    run_ranks(2, "sim", prog)


def test_mismatched_lengths_are_detected():
    with pytest.raises(LengthMismatch):
        run_ranks(
            2,
            "sim",
            lambda ep: allreduce_ring(ep, GradientBuffer.zeros(4 if ep.rank else 5)),
        )


def test_tree_set_size_must_match_run():
    ts = build_multicolor_trees(8, k=4)

    def prog(ep):
        with pytest.raises(InvalidConfig):
            allreduce_multicolor(ep, GradientBuffer.zeros(4), ts)

    run_ranks(4, "sim", prog)


def test_back_to_back_collectives_reuse_tags_safely():
    ts = build_multicolor_trees(4, k=4)

    def prog(ep):
        a = allreduce_multicolor(ep, GradientBuffer.of([float(ep.rank)]), ts)
        first = float(a.data[0])
        b = allreduce_multicolor(ep, GradientBuffer.of([first]), ts)
        return float(b.data[0])

    res = run_ranks(4, "sim", prog).results
    assert res == [24.0] * 4  # sum(0..3)=6, then 6*4


# -- alltoallv -------------------------------------------------------------


def test_alltoallv_two_rank_swap():
    def prog(ep):
        if ep.rank == 0:
            send = VarPayload.from_slices([b"", b"ab"])
        else:
            send = VarPayload.from_slices([b"xyz", b""])
        return bytes(alltoallv(ep, send).slice_for(1 - ep.rank))

    assert run_ranks(2, "sim", prog).results == [b"xyz", b"ab"]


def test_alltoallv_all_empty():
    res = run_ranks(
        4, "sim", lambda ep: alltoallv(ep, VarPayload.from_slices([b""] * 4)).data
    ).results
    assert res == [b""] * 4


@pytest.mark.parametrize("backend", ["sim", "threads"])
def test_alltoallv_matches_transpose(backend):
    rng = np.random.default_rng(15)
    mats = [[rng.bytes(int(rng.integers(0, 2000))) for _ in range(4)] for _ in range(4)]
    want = [b"".join(mats[src][dst] for src in range(4)) for dst in range(4)]
    res = run_ranks(
        4,
        backend,
        lambda ep: alltoallv(ep, VarPayload.from_slices(mats[ep.rank])).data,
    ).results
    assert res == want


def test_alltoallv_self_slice_is_preserved():
    def prog(ep):
        slices = [b""] * 4
        slices[ep.rank] = f"keep {ep.rank}".encode()
        out = alltoallv(ep, VarPayload.from_slices(slices))
        return bytes(out.slice_for(ep.rank))

    assert run_ranks(4, "sim", prog).results == [f"keep {r}".encode() for r in range(4)]


def test_var_payload_validation():
    p = VarPayload.from_slices([b"ab", b"c"])
    p.validate(2)
    with pytest.raises(LengthMismatch):
        p.validate(3)
    with pytest.raises(LengthMismatch):
        VarPayload(b"abc", (0, 2), (2, 2)).validate(2)  # overlapping slices
    with pytest.raises(LengthMismatch):
        VarPayload(b"abc", (0, 1), (1, -1)).validate(2)
    # no allocation needed to reject a > 2^31 slice
    with pytest.raises(OffsetOverflow):
        VarPayload(b"", (0, 0), (0, 1 << 31)).validate(2)


def test_var_payload_wrong_rank_count_detected_in_collective():
    def prog(ep):
        with pytest.raises(LengthMismatch):
            alltoallv(ep, VarPayload.from_slices([b"x"]))

    run_ranks(2, "sim", prog)
