from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from minidist.dimd import (
    BatchRequest,
    IndexEntry,
    Record,
    ShardStore,
    build_blob,
    default_segments,
    load_partition,
    parse_index,
    random_batch,
    shard_from_bytes,
    shuffle_all,
    shuffle_group,
)
from minidist.errors import (
    EmptyShard,
    FormatError,
    GroupMismatch,
    InvalidConfig,
    IoError,
    RecordTooLarge,
)
from minidist.transport import run_ranks
from oracles import rand_records


def multiset(records):
    return Counter((r.bytes, r.label) for r in records)


class SparseBlob:
    """Sliceable stand-in for a blob too large to materialize."""

    def __init__(self, size):
        self.size = size

    def __len__(self):
        return self.size

    def __getitem__(self, sl):
        return b"\x5a" * (sl.stop - sl.start)


# -- codec ---------------------------------------------------------------------


def test_codec_small_exact():
    blob, index = build_blob([Record(b"hello", 3)])
    assert blob == b"hello"
    assert index[:4] == b"DIMD"
    assert parse_index(index) == [IndexEntry(0, 5, 3)]
    blob, index = build_blob([Record(b"ab", 1), Record(b"cdef", 2), Record(b"g", 3)])
    assert blob == b"abcdefg"
    assert [e.offset for e in parse_index(index)] == [0, 2, 6]


def test_codec_empty_dataset():
    blob, index = build_blob([])
    assert blob == b""
    assert parse_index(index) == []


def test_codec_is_deterministic():
    recs = rand_records(np.random.default_rng(0), 50)
    assert build_blob(recs) == build_blob(recs)


@given(st.data())
def test_codec_round_trip(data):
    recs = [
        Record(bytes(data.draw(st.binary(min_size=1, max_size=64))), data.draw(st.integers(0, (1 << 32) - 1)))
        for _ in range(data.draw(st.integers(0, 20)))
    ]
    blob, index = build_blob(recs)
    entries = parse_index(index)
    store = ShardStore(blob, entries, 0, 1, 0)
    assert store.records() == recs
    assert store.nbytes == sum(len(r.bytes) for r in recs)


def test_codec_rejects_bad_records():
    with pytest.raises(InvalidConfig):
        build_blob([Record(b"", 0)])
    with pytest.raises(InvalidConfig):
        build_blob([Record(b"x", 1 << 32)])
    with pytest.raises(InvalidConfig):
        build_blob([Record(b"x", -1)])


def test_record_too_large_detected_without_allocation():
    class HugeBytes:
        def __len__(self):
            return 1 << 31

    with pytest.raises(RecordTooLarge):
        build_blob([Record(HugeBytes(), 0)])


def test_parse_rejects_malformed_indexes():
    _, index = build_blob([Record(b"ab", 1)])
    with pytest.raises(FormatError):
        parse_index(b"DIMX" + index[4:])
    with pytest.raises(FormatError):
        parse_index(index[:-3])
    with pytest.raises(FormatError):
        parse_index(index + b"\0" * 16)
    with pytest.raises(FormatError):
        parse_index(b"")
    # version bump
    bad = bytearray(index)
    bad[4] = 99
    with pytest.raises(FormatError):
        parse_index(bytes(bad))


# -- partitioning ----------------------------------------------------------------


def test_striping_rule():
    recs = rand_records(np.random.default_rng(1), 6)
    blob, idx = build_blob(recs)
    entries = parse_index(idx)
    s0 = shard_from_bytes(blob, entries, rank=0, n_ranks=2, group_size=2)
    assert s0.records() == [recs[0], recs[2], recs[4]]
    s1 = shard_from_bytes(blob, entries, rank=1, n_ranks=2, group_size=2)
    assert s1.records() == [recs[1], recs[3], recs[5]]


def test_every_group_holds_the_full_dataset():
    recs = rand_records(np.random.default_rng(2), 20)
    blob, idx = build_blob(recs)
    entries = parse_index(idx)
    # 8 ranks in 2 groups of 4: each group's union is the whole corpus
    for group in (0, 1):
        union = []
        for r in range(group * 4, group * 4 + 4):
            union += shard_from_bytes(blob, entries, r, 8, 4).records()
        assert multiset(union) == multiset(recs)


def test_group_size_one_replicates_everything():
    recs = rand_records(np.random.default_rng(3), 10)
    blob, idx = build_blob(recs)
    entries = parse_index(idx)
    for r in range(3):
        assert shard_from_bytes(blob, entries, r, 3, 1).records() == recs


def test_partition_argument_validation():
    recs = rand_records(np.random.default_rng(4), 6)
    blob, idx = build_blob(recs)
    entries = parse_index(idx)
    with pytest.raises(GroupMismatch):
        shard_from_bytes(blob, entries, 0, 6, 4)
    with pytest.raises(InvalidConfig):
        shard_from_bytes(blob, entries, 6, 6, 2)
    with pytest.raises(InvalidConfig):
        shard_from_bytes(blob, entries, 0, 0, 1)
    with pytest.raises(FormatError):
        shard_from_bytes(blob[:-1], entries, 0, 1, 1)  # entry past the end


def test_load_partition_from_files(tmp_path):
    recs = rand_records(np.random.default_rng(5), 100)
    blob, idx = build_blob(recs)
    bp, ip = tmp_path / "d.blob", tmp_path / "d.idx"
    bp.write_bytes(blob)
    ip.write_bytes(idx)
    store = load_partition(bp, ip, rank=0, n_ranks=1, group_size=1)
    assert store.records() == recs
    with pytest.raises(IoError):
        load_partition(tmp_path / "missing.blob", ip, 0, 1, 1)


# -- sampling --------------------------------------------------------------------


def test_random_batch_single_record():
    one = ShardStore(b"zz", [IndexEntry(0, 2, 9)], 0, 1, 0)
    assert random_batch(one, BatchRequest(4, 1)) == [Record(b"zz", 9)] * 4


def test_random_batch_deterministic():
    recs = rand_records(np.random.default_rng(6), 10)
    blob, idx = build_blob(recs)
    st10 = shard_from_bytes(blob, parse_index(idx), 0, 1, 1)
    assert random_batch(st10, BatchRequest(64, 42)) == random_batch(st10, BatchRequest(64, 42))
    assert random_batch(st10, BatchRequest(64, 42)) != random_batch(st10, BatchRequest(64, 43))


def test_random_batch_draws_with_replacement_uniformly():
    recs = rand_records(np.random.default_rng(7), 10)
    blob, idx = build_blob(recs)
    store = shard_from_bytes(blob, parse_index(idx), 0, 1, 1)
    draws = random_batch(store, BatchRequest(100000, 5))
    freq = Counter(r.bytes for r in draws)
    exp, sd = 10000, (100000 * 0.1 * 0.9) ** 0.5
    assert all(abs(v - exp) < 3 * sd for v in freq.values()), freq


def test_random_batch_rejects_empty_shard_and_bad_request():
    with pytest.raises(EmptyShard):
        random_batch(ShardStore(b"", [], 0, 1, 0), BatchRequest(1, 0))
    with pytest.raises(InvalidConfig):
        BatchRequest(0, 1)


# -- shuffle ---------------------------------------------------------------------


def corpus_fixture(n_records, seed):
    recs = rand_records(np.random.default_rng(seed), n_records)
    blob, idx = build_blob(recs)
    return recs, blob, parse_index(idx)


def test_self_shuffle_permutes_in_place():
    recs, blob, entries = corpus_fixture(10, 8)
    store = shard_from_bytes(blob, entries, 0, 1, 1)
    out = run_ranks(1, "sim", lambda ep: shuffle_all(ep, store, m_segments=2, seed=9)).results[0]
    assert multiset(out.records()) == multiset(store.records())
    assert out.records() != store.records()


def test_shuffle_conserves_and_is_deterministic():
    recs, blob, entries = corpus_fixture(200, 9)

    def body_all(ep):
        st = shard_from_bytes(blob, entries, ep.rank, ep.n_ranks, ep.n_ranks)
        return shuffle_all(ep, st, m_segments=3, seed=77)

    def body_grp(ep):
        st = shard_from_bytes(blob, entries, ep.rank, ep.n_ranks, ep.n_ranks)
        return shuffle_group(ep, st, m_segments=3, seed=77)

    ra = run_ranks(4, "sim", body_all)
    rg = run_ranks(4, "sim", body_grp)
    ra2 = run_ranks(4, "sim", body_all)
    total = Counter()
    for s in ra.results:
        total += multiset(s.records())
    assert total == multiset(recs)
    for sa, sg in zip(ra.results, rg.results):
        assert sa.records() == sg.records()
    for s1, s2 in zip(ra.results, ra2.results):
        assert s1.records() == s2.records()
    # destinations i.i.d. uniform: binomial 3 sigma on per-rank counts
    exp, sd = 50, (200 * 0.25 * 0.75) ** 0.5
    for s in ra.results:
        assert abs(s.n_records - exp) <= 3 * sd


def test_shuffle_matches_on_threads_backend():
    recs, blob, entries = corpus_fixture(60, 10)

    def body(ep):
        st = shard_from_bytes(blob, entries, ep.rank, ep.n_ranks, ep.n_ranks)
        return [r.bytes for r in shuffle_all(ep, st, m_segments=2, seed=4).records()]

    assert run_ranks(4, "sim", body).results == run_ranks(4, "threads", body).results


def test_groups_never_leak_records():
    recs, blob, entries = corpus_fixture(200, 11)

    def body(ep):
        st = shard_from_bytes(blob, entries, ep.rank, ep.n_ranks, 2)
        return shuffle_group(ep, st, m_segments=2, seed=5)

    out = run_ranks(4, "sim", body).results
    for gid in (0, 1):
        want, got = Counter(), Counter()
        for rnk in (gid * 2, gid * 2 + 1):
            want += multiset(shard_from_bytes(blob, entries, rnk, 4, 2).records())
            got += multiset(out[rnk].records())
        assert want == got

    def body_all(ep):
        st = shard_from_bytes(blob, entries, ep.rank, ep.n_ranks, 2)
        return shuffle_all(ep, st, m_segments=2, seed=5)

    out_all = run_ranks(4, "sim", body_all).results
    for sa, sg in zip(out_all, out):
        assert sa.records() == sg.records()


def test_shuffle_rejects_mismatched_group_shape():
    recs, blob, entries = corpus_fixture(12, 12)

    def body(ep):
        st = shard_from_bytes(blob, entries, ep.rank, 6, 3)  # wrong world
        with pytest.raises(GroupMismatch):
            shuffle_all(ep, st, seed=1)

    run_ranks(4, "sim", body)


def test_default_segments_targets_one_gib():
    assert default_segments(0) == 1
    assert default_segments(1) == 1
    assert default_segments(1 << 30) == 1
    assert default_segments((1 << 30) + 1) == 2
    assert default_segments(10 << 30) == 10


def test_more_segments_than_records_is_fine():
    recs, blob, entries = corpus_fixture(3, 13)

    def body(ep):
        st = shard_from_bytes(blob, entries, ep.rank, 2, 2)
        return shuffle_all(ep, st, m_segments=16, seed=2)

    out = run_ranks(2, "sim", body).results
    assert multiset(out[0].records()) + multiset(out[1].records()) == multiset(recs)


def test_shuffle_handles_offsets_past_4gib_without_allocating():
    base = 1 << 32
    s0 = ShardStore(SparseBlob(base + 4096), [IndexEntry(base + i * 100, 10, i) for i in range(8)], 0, 2, 0)
    s1 = ShardStore(SparseBlob(base + 4096), [IndexEntry(base + i * 100 + 50, 10, 100 + i) for i in range(8)], 0, 2, 1)

    def body(ep):
        return shuffle_all(ep, s0 if ep.rank == 0 else s1, m_segments=4, seed=3)

    out = run_ranks(2, "sim", body).results
    assert sum(s.n_records for s in out) == 16
    assert all(len(r.bytes) == 10 for s in out for r in s.records())
    labels = sorted(r.label for s in out for r in s.records())
    assert labels == sorted(list(range(8)) + list(range(100, 108)))
