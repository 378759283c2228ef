"""Distributed in-memory dataset store.

A dataset is two files: a blob of concatenated opaque records and an
index mapping each record to (offset, length, label). Ranks are
grouped consecutively; each group collectively owns one full copy of
the dataset, striped record-by-record across its members. Shuffling
exchanges records inside each group with a segmented alltoallv so no
single transfer slice ever needs a 64-bit length.

Every random choice is counter-based: a Philox generator keyed by a
splitmix64 hash of (seed, role...) makes shuffles and batches exact
functions of their inputs, with no state carried between calls.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from minidist.collectives import VarPayload, alltoallv
from minidist.errors import (
    EmptyShard,
    FormatError,
    GroupMismatch,
    InvalidConfig,
    IoError,
    RecordTooLarge,
    SegmentOverflow,
)
from minidist.transport.base import SubCommunicator

INDEX_MAGIC = b"DIMD"
INDEX_VERSION = 1

_HEADER = struct.Struct("<4sIQ")  # magic, version, record count
_ENTRY_DTYPE = np.dtype([("offset", "<u8"), ("length", "<u4"), ("label", "<u4")])
_META_DTYPE = np.dtype([("length", "<u4"), ("label", "<u4")])

_MAX_RECORD = 1 << 31
_MAX_LABEL = 1 << 32
_MASK64 = (1 << 64) - 1
_SEGMENT_TARGET = 1 << 30  # default shuffle segmenting aims at ~1 GiB


@dataclass(frozen=True)
class IndexEntry:
    """One record's location in the blob plus its class label."""

    offset: int
    length: int
    label: int


@dataclass(frozen=True)
class Record:
    bytes: bytes
    label: int


@dataclass(frozen=True)
class BatchRequest:
    """How many records to draw and from which random stream."""

    batch_size: int
    rng_seed: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class ShardStore:
    """One rank's resident slice of the dataset.

    blob is anything sliceable with a length (real bytes in normal use;
    tests substitute lazy buffers to exercise >4 GiB offsets without
    allocating). Entries always resolve inside it.
    """

    blob: object
    index: list[IndexEntry]
    group_id: int
    group_size: int
    rank_in_group: int

    @property
    def n_records(self) -> int:
        return len(self.index)

    @property
    def nbytes(self) -> int:
        """Resident payload bytes (what shuffle and the benchmarks report)."""
        return sum(e.length for e in self.index)

    def record(self, i: int) -> Record:
        e = self.index[i]
        return Record(bytes(self.blob[e.offset : e.offset + e.length]), e.label)

    def records(self) -> list[Record]:
        return [self.record(i) for i in range(len(self.index))]


# -- blob + index codec -------------------------------------------------------


def build_blob(records) -> tuple[bytes, bytes]:
    """Concatenate records into (blob_bytes, index_bytes)."""
    parts = []
    table = np.empty(len(records), dtype=_ENTRY_DTYPE)
    pos = 0
    for i, rec in enumerate(records):
        n = len(rec.bytes)
        if n == 0:
            raise InvalidConfig(f"record {i} is empty")
        if n >= _MAX_RECORD:
            raise RecordTooLarge(f"record {i} is {n} bytes, limit is {_MAX_RECORD - 1}")
        if not 0 <= rec.label < _MAX_LABEL:
            raise InvalidConfig(f"label {rec.label} does not fit an unsigned 32-bit field")
        table[i] = (pos, n, rec.label)
        parts.append(rec.bytes)
        pos += n
    index = _HEADER.pack(INDEX_MAGIC, INDEX_VERSION, len(records)) + table.tobytes()
    return b"".join(parts), index


def parse_index(data: bytes) -> list[IndexEntry]:
    """Decode an index file; raises FormatError on anything malformed."""
    if len(data) < _HEADER.size:
        raise FormatError(f"index truncated: {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != INDEX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {INDEX_MAGIC!r}")
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    expected = _HEADER.size + count * _ENTRY_DTYPE.itemsize
    if len(data) != expected:
        raise FormatError(f"index holds {len(data)} bytes, {count} records need {expected}")
    table = np.frombuffer(data, dtype=_ENTRY_DTYPE, count=count, offset=_HEADER.size)
    entries = []
    prev_end = 0
    for i in range(count):
        offset, length, label = (int(v) for v in table[i])
        if length == 0:
            raise FormatError(f"record {i} has zero length")
        if offset < prev_end:
            raise FormatError(f"record {i} at offset {offset} overlaps the previous record")
        prev_end = offset + length
        entries.append(IndexEntry(offset, length, label))
    return entries


# -- loading ------------------------------------------------------------------


def _read_file(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e


def shard_from_bytes(
    blob, entries: list[IndexEntry], rank: int, n_ranks: int, group_size: int
) -> ShardStore:
    """Select this rank's records by the striping rule and materialize them.

    Record i of the dataset belongs to the group member with
    i mod group_size == rank_in_group; the shard blob holds only those
    records, so resident memory tracks the shard, not the dataset.
    """
    if n_ranks < 1:
        raise InvalidConfig(f"need at least 1 rank, got {n_ranks}")
    if not 0 <= rank < n_ranks:
        raise InvalidConfig(f"rank {rank} out of range for {n_ranks} ranks")
    if group_size < 1:
        raise InvalidConfig(f"group_size must be >= 1, got {group_size}")
    if n_ranks % group_size != 0:
        raise GroupMismatch(f"group size {group_size} does not divide {n_ranks} ranks")
    blob_len = len(blob)
    for i, e in enumerate(entries):
        if e.offset + e.length > blob_len:
            raise FormatError(
                f"record {i} spans [{e.offset}, {e.offset + e.length}) "
                f"outside the {blob_len}-byte blob"
            )
    group_id = rank // group_size
    rank_in_group = rank % group_size
    mine = entries[rank_in_group::group_size]
    parts = []
    local = []
    pos = 0
    for e in mine:
        parts.append(bytes(blob[e.offset : e.offset + e.length]))
        local.append(IndexEntry(pos, e.length, e.label))
        pos += e.length
    return ShardStore(b"".join(parts), local, group_id, group_size, rank_in_group)


def load_partition(blob_path, index_path, rank: int, n_ranks: int, group_size: int) -> ShardStore:
    """Load this rank's shard of a blob+index dataset from disk."""
    entries = parse_index(_read_file(index_path))
    blob = _read_file(blob_path)
    return shard_from_bytes(blob, entries, rank, n_ranks, group_size)


# -- random batches -----------------------------------------------------------


def random_batch(store: ShardStore, req: BatchRequest) -> list[Record]:
    """Sample batch_size records uniformly with replacement."""
    n = store.n_records
    if n == 0:
        raise EmptyShard("cannot sample from an empty shard")
    rng = np.random.Generator(np.random.Philox(key=req.rng_seed & _MASK64))
    picks = rng.integers(0, n, size=req.batch_size)
    return [store.record(int(i)) for i in picks]


# -- shuffle ------------------------------------------------------------------


def _mix64(*parts: int) -> int:
    """Collapse a tuple of role integers into one 64-bit generator key."""
    acc = 0
    for p in parts:
        acc = (acc + (int(p) & _MASK64) + 0x9E3779B97F4A7C15) & _MASK64
        acc = ((acc ^ (acc >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        acc = ((acc ^ (acc >> 27)) * 0x94D049BB133111EB) & _MASK64
        acc ^= acc >> 31
    return acc


_PERM_ROLE = int.from_bytes(b"perm", "little")
_DEST_ROLE = int.from_bytes(b"dest", "little")


def default_segments(shard_bytes: int) -> int:
    """Segment count keeping per-exchange slices far below 2^31 bytes."""
    return max(1, -(-shard_bytes // _SEGMENT_TARGET))


def _check_group(ep, store: ShardStore) -> None:
    if ep.n_ranks % store.group_size != 0:
        raise GroupMismatch(
            f"group size {store.group_size} does not divide {ep.n_ranks} ranks"
        )
    if (
        store.group_id != ep.rank // store.group_size
        or store.rank_in_group != ep.rank % store.group_size
    ):
        raise GroupMismatch(
            f"rank {ep.rank} holds a shard labeled group {store.group_id} "
            f"member {store.rank_in_group}, which is not its position"
        )


def shuffle_all(ep, store: ShardStore, m_segments: int | None = None, seed: int = 0) -> ShardStore:
    """Exchange records within each group, all ranks participating.

    Cross-group slices are structurally empty, so one global alltoallv
    per segment serves every group at once.
    """
    _check_group(ep, store)
    first = store.group_id * store.group_size
    return _shuffle(ep, store, m_segments, seed, ep.rank, lambda d: first + d)


def shuffle_group(ep, store: ShardStore, m_segments: int | None = None, seed: int = 0) -> ShardStore:
    """Exchange records inside this rank's group over a sub-communicator."""
    _check_group(ep, store)
    first = store.group_id * store.group_size
    members = list(range(first, first + store.group_size))
    comm = ep if store.group_size == ep.n_ranks else SubCommunicator(ep, members)
    return _shuffle(comm, store, m_segments, seed, ep.rank, lambda d: d)


def _shuffle(comm, store, m_segments, seed, global_rank, dest_to_peer) -> ShardStore:
    """Segmented alltoallv record exchange plus a final local permutation.

    Destinations for segment t come from a generator keyed by (seed,
    group, member, t), identical however the communicator is laid out,
    so shuffle_all and shuffle_group yield identical shards.
    """
    if m_segments is None:
        m_segments = default_segments(store.nbytes)
    if m_segments < 1:
        raise InvalidConfig(f"m_segments must be >= 1, got {m_segments}")
    for i, e in enumerate(store.index):
        if e.length >= _MAX_RECORD:
            raise SegmentOverflow(
                f"record {i} is {e.length} bytes; no exchange slice may reach {_MAX_RECORD}"
            )

    s = store.group_size
    n_rec = store.n_records
    got_bytes: list[bytes] = []
    got_labels: list[int] = []

    for t in range(m_segments):
        lo = t * n_rec // m_segments
        hi = (t + 1) * n_rec // m_segments
        dests = np.asarray([], dtype=np.int64)
        if hi > lo:
            key = _mix64(seed, _DEST_ROLE, store.group_id, store.rank_in_group, t)
            rng = np.random.Generator(np.random.Philox(key=key))
            dests = rng.integers(0, s, size=hi - lo)

        meta_slices: list[bytes] = [b""] * comm.n_ranks
        data_slices: list[bytes] = [b""] * comm.n_ranks
        for d in range(s):
            picked = np.flatnonzero(dests == d) + lo
            meta = np.empty(len(picked), dtype=_META_DTYPE)
            parts = []
            for j, ri in enumerate(picked):
                e = store.index[ri]
                meta[j] = (e.length, e.label)
                parts.append(bytes(store.blob[e.offset : e.offset + e.length]))
            peer = dest_to_peer(d)
            meta_slices[peer] = meta.tobytes()
            data_slices[peer] = b"".join(parts)

        meta_in = alltoallv(comm, VarPayload.from_slices(meta_slices))
        data_in = alltoallv(comm, VarPayload.from_slices(data_slices))
        for src in range(comm.n_ranks):
            table = np.frombuffer(bytes(meta_in.slice_for(src)), dtype=_META_DTYPE)
            blob = data_in.slice_for(src)
            pos = 0
            for length, label in table:
                got_bytes.append(bytes(blob[pos : pos + int(length)]))
                got_labels.append(int(label))
                pos += int(length)

    perm = np.random.Generator(
        np.random.Philox(key=_mix64(seed, _PERM_ROLE, global_rank))
    ).permutation(len(got_bytes))
    entries = []
    parts = []
    pos = 0
    for i in perm:
        b = got_bytes[int(i)]
        entries.append(IndexEntry(pos, len(b), got_labels[int(i)]))
        parts.append(b)
        pos += len(b)
    return ShardStore(
        b"".join(parts), entries, store.group_id, store.group_size, store.rank_in_group
    )
