"""Allreduce (multi-color tree, pipelined ring, reduce+broadcast) and
AllToAllV over the point-to-point transport.

Reductions use one fixed float summation order: a node folds child
contributions in child-list order (ascending rank order for the naive
baseline), so results are bitwise reproducible across runs and
backends. Transfers overlap freely; only the adds are ordered.

Exposures reference the live gradient buffer instead of snapshotting
it; a rank only rewrites a range after the consumer of its previous
exposure has pulled it, which every schedule below guarantees through
its data dependencies (a parent folds a child's segment before the
child can see the broadcast value for that segment).

Each collective entry performs a length header exchange through rank
0. Besides catching mismatched buffers, that exchange doubles as a
barrier: no rank starts a collective before every rank finished the
previous one, which is what makes per-call tag reuse safe.
"""

from __future__ import annotations

import mmap
import struct
from dataclasses import dataclass

import numpy as np

from minidist import _kernels
from minidist.errors import InvalidConfig, LengthMismatch, OffsetOverflow
from minidist.topology import (
    ColorTreeSet,
    RingOrder,
    build_multicolor_trees,
    build_ring,
    make_chunk_plan,
)

PIPELINE_DEPTH = 4
DEFAULT_SEGMENT_ELEMS = 16384  # 64 KiB of float32 per segment
ALGORITHMS = ("multicolor", "ring", "reduce_bcast")

_MAX_SLICE = 1 << 31

# tag layout: 2 direction bits | 7 color bits | 21 segment bits (< 2^30)
_SEG_BITS = 21
_COLOR_BITS = 7
_UP, _DOWN, _CTRL = 0, 1, 2
_HDR = struct.Struct("<Q")


def _tag(direction: int, color: int, segment: int) -> int:
    return (direction << (_COLOR_BITS + _SEG_BITS)) | (color << _SEG_BITS) | segment


_LEN_TAG = _tag(_CTRL, 0, 0)
_A2A_LEN_TAG = _tag(_CTRL, 1, 0)
_A2A_DATA_TAG = _tag(_CTRL, 1, 1)


@dataclass
class GradientBuffer:
    """Flat float32 payload; owned by a collective for the call's duration."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.float32:
            raise InvalidConfig(f"buffer must be float32, got {arr.dtype}")
        if arr.ndim != 1:
            raise InvalidConfig(f"buffer must be 1-D, got {arr.ndim}-D")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr

    @property
    def len(self) -> int:
        return int(self.data.shape[0])

    @classmethod
    def zeros(cls, n: int) -> GradientBuffer:
        return cls(np.zeros(n, dtype=np.float32))

    @classmethod
    def of(cls, values) -> GradientBuffer:
        return cls(np.asarray(values, dtype=np.float32))

    @classmethod
    def alloc(cls, n: int) -> GradientBuffer:
        """Zeroed buffer backed by prefaulted anonymous mmap.

        For benchmark-scale payloads (tens of MiB) this is much faster
        than growing the heap, whose pages would otherwise fault one at
        a time mid-measurement. Falls back to plain zeros when the
        madvise hints are unavailable.
        """
        if n < 1 << 16:
            return cls.zeros(n)
        buf = mmap.mmap(-1, n * 4)
        # 23 = Linux MADV_POPULATE_WRITE, named only from Python 3.12
        for flag in (getattr(mmap, "MADV_HUGEPAGE", None), getattr(mmap, "MADV_POPULATE_WRITE", 23)):
            if flag is not None:
                try:
                    buf.madvise(flag)
                except (OSError, ValueError):
                    pass
        return cls(np.frombuffer(buf, dtype=np.float32))


@dataclass(frozen=True)
class SegmentSchedule:
    """Per-color segment ranges covering each color's chunk in order."""

    segment_elems: int
    per_color: tuple[tuple[tuple[int, int], ...], ...]


def make_segment_schedule(payload_len: int, k: int, segment_elems: int) -> SegmentSchedule:
    if segment_elems < 1:
        raise InvalidConfig(f"segment_elems must be >= 1, got {segment_elems}")
    plan = make_chunk_plan(payload_len, k)
    per_color = []
    for chunk in plan.chunks:
        ranges = _segment_ranges(chunk.start, chunk.length, segment_elems)
        if len(ranges) >= 1 << _SEG_BITS:
            raise InvalidConfig(
                f"{len(ranges)} segments for one color exceeds the tag space; "
                f"raise segment_elems"
            )
        per_color.append(tuple(ranges))
    return SegmentSchedule(segment_elems, tuple(per_color))


def _segment_ranges(start: int, length: int, segment_elems: int) -> list[tuple[int, int]]:
    out = []
    pos, end = start, start + length
    while pos < end:
        hi = min(pos + segment_elems, end)
        out.append((pos, hi))
        pos = hi
    return out


def elementwise_add(dst: GradientBuffer, src: GradientBuffer) -> None:
    """dst[i] += src[i]; the reduction kernel every collective uses."""
    if dst.len != src.len:
        raise LengthMismatch(f"add of length {src.len} into length {dst.len}")
    _kernels.add_f32(dst.data, src.data)


def _debug_check_finite(buf: GradientBuffer) -> None:
    if __debug__ and buf.len:
        assert bool(np.isfinite(buf.data).all()), "non-finite values in gradient buffer"


def _check_same_length(ep, n_elems: int) -> None:
    """Length header exchange through rank 0; doubles as a barrier."""
    if ep.n_ranks == 1:
        return
    if ep.rank == 0:
        lens = [n_elems]
        for r in range(1, ep.n_ranks):
            lens.append(_HDR.unpack(ep.recv(r, _LEN_TAG))[0])
        ok = all(ln == lens[0] for ln in lens)
        verdict = b"\x01" if ok else b"\x00"
        for r in range(1, ep.n_ranks):
            ep.send(r, _LEN_TAG, verdict)
        if not ok:
            raise LengthMismatch(f"ranks disagree on buffer length: {lens}")
    else:
        ep.send(0, _LEN_TAG, _HDR.pack(n_elems))
        if ep.recv(0, _LEN_TAG) == b"\x00":
            raise LengthMismatch("ranks disagree on buffer length")


# -- cooperative task engine ------------------------------------------------
#
# A task is a generator that yields transport futures when it must wait.
# Sources feed tasks into the driver lazily; each source keeps at most
# `depth` tasks alive, which is what bounds how many segments of one
# stream are in flight.


def _drive(ep, sources) -> None:
    iters = [iter(gens) for gens, _ in sources]
    depths = [depth for _, depth in sources]
    exhausted = [False] * len(sources)
    counts = [0] * len(sources)
    active: list[list] = []  # [source_idx, generator, pending future or None]

    def refill(i: int) -> None:
        while counts[i] < depths[i] and not exhausted[i]:
            try:
                gen = next(iters[i])
            except StopIteration:
                exhausted[i] = True
                return
            counts[i] += 1
            active.append([i, gen, None])

    for i in range(len(sources)):
        refill(i)

    while active:
        progressed = False
        for slot in list(active):
            i, gen, fut = slot
            if fut is not None and not fut.done():
                continue
            progressed = True
            try:
                slot[2] = next(gen)
            except StopIteration:
                active.remove(slot)
                counts[i] -= 1
                refill(i)
        if not progressed:
            ep.wait_any([slot[2] for slot in active if slot[2] is not None])


# -- multi-color tree allreduce ----------------------------------------------


def allreduce_multicolor(
    ep,
    buf: GradientBuffer,
    ts: ColorTreeSet | None = None,
    segment_elems: int = DEFAULT_SEGMENT_ELEMS,
) -> GradientBuffer:
    """Sum buffers across ranks along k color trees, pipelined.

    Interior nodes pull child segments and fold them in child-list
    order; each root then broadcasts its chunk down the same tree. The
    k colors progress concurrently with no cross-color coordination.
    """
    _debug_check_finite(buf)
    _check_same_length(ep, buf.len)
    if ep.n_ranks == 1:
        return buf
    if ts is None:
        ts = build_multicolor_trees(ep.n_ranks)
    if ts.n_ranks != ep.n_ranks:
        raise InvalidConfig(f"tree set built for {ts.n_ranks} ranks, run has {ep.n_ranks}")
    if ts.k >= 1 << _COLOR_BITS:
        raise InvalidConfig(f"{ts.k} colors exceeds the tag space")
    schedule = make_segment_schedule(buf.len, ts.k, segment_elems)

    arr = buf.data
    sources = []
    for color, segments in enumerate(schedule.per_color):
        tree = ts.trees[color]
        children = tree.children[ep.rank]
        parent = tree.parent[ep.rank]
        # list, not genexp: tasks must bind this iteration's color/tree
        up_gens = [
            _tree_up_task(ep, arr, color, si, lo, hi, children, parent)
            for si, (lo, hi) in enumerate(segments)
        ]
        sources.append((up_gens, PIPELINE_DEPTH))
        if parent is not None:
            down_gens = [
                _tree_down_task(ep, arr, color, si, lo, hi, children, parent)
                for si, (lo, hi) in enumerate(segments)
            ]
            sources.append((down_gens, PIPELINE_DEPTH))
    _drive(ep, sources)
    return buf


def _tree_up_task(ep, arr, color, si, lo, hi, children, parent):
    """Reduce one segment: fold children in order, pass upward."""
    seg = arr[lo:hi]
    nbytes = (hi - lo) * 4
    up = _tag(_UP, color, si)
    if children:
        futs = [ep.pull_async(child, up, nbytes) for child in children]
        for fut in futs:  # transfers overlap; adds stay in child order
            yield fut
            _kernels.add_f32(seg, np.frombuffer(fut.result(), dtype=np.float32))
    if parent is None:
        ep.expose(_tag(_DOWN, color, si), seg, consumers=len(children))
    else:
        # safe zero-copy: this range next changes in the down task, which
        # cannot run before the parent has folded (consumed) this exposure
        ep.expose(up, seg, consumers=1)


def _tree_down_task(ep, arr, color, si, lo, hi, children, parent):
    """Broadcast one segment: fetch the final value, re-expose for children."""
    down = _tag(_DOWN, color, si)
    fut = ep.pull_async(parent, down, (hi - lo) * 4)
    yield fut
    arr[lo:hi] = np.frombuffer(fut.result(), dtype=np.float32)
    if children:
        ep.expose(down, arr[lo:hi], consumers=len(children))


# -- pipelined ring allreduce -------------------------------------------------


def allreduce_ring(
    ep,
    buf: GradientBuffer,
    ring: RingOrder | None = None,
    segment_elems: int = DEFAULT_SEGMENT_ELEMS,
) -> GradientBuffer:
    """Reduce segments hop by hop to the ring root, broadcast back."""
    _debug_check_finite(buf)
    _check_same_length(ep, buf.len)
    if ep.n_ranks == 1:
        return buf
    if ring is None:
        ring = build_ring(ep.n_ranks)
    if sorted(ring.order) != list(range(ep.n_ranks)):
        raise InvalidConfig(f"ring order {ring.order} is not a permutation of all ranks")
    schedule = make_segment_schedule(buf.len, 1, segment_elems)
    segments = schedule.per_color[0]

    pos = ring.order.index(ep.rank)
    succ = ring.order[pos + 1] if pos + 1 < ep.n_ranks else None
    pred = ring.order[pos - 1] if pos > 0 else None
    arr = buf.data

    def up_tasks():
        for si, (lo, hi) in enumerate(segments):
            yield _ring_up_task(ep, arr, si, lo, hi, succ, pred)

    sources = [(up_tasks(), PIPELINE_DEPTH)]
    if pred is not None:
        def down_tasks():
            for si, (lo, hi) in enumerate(segments):
                yield _ring_down_task(ep, arr, si, lo, hi, succ, pred)

        sources.append((down_tasks(), PIPELINE_DEPTH))
    _drive(ep, sources)
    return buf


def _ring_up_task(ep, arr, si, lo, hi, succ, pred):
    seg = arr[lo:hi]
    up = _tag(_UP, 0, si)
    if succ is not None:
        fut = ep.pull_async(succ, up, (hi - lo) * 4)
        yield fut
        _kernels.add_f32(seg, np.frombuffer(fut.result(), dtype=np.float32))
    if pred is not None:
        ep.expose(up, seg, consumers=1)
    elif succ is not None:  # ring root: reduction done, start the broadcast
        ep.expose(_tag(_DOWN, 0, si), seg, consumers=1)


def _ring_down_task(ep, arr, si, lo, hi, succ, pred):
    down = _tag(_DOWN, 0, si)
    fut = ep.pull_async(pred, down, (hi - lo) * 4)
    yield fut
    arr[lo:hi] = np.frombuffer(fut.result(), dtype=np.float32)
    if succ is not None:
        ep.expose(down, arr[lo:hi], consumers=1)


# -- naive baseline ------------------------------------------------------------


def reduce_then_broadcast(ep, buf: GradientBuffer, root: int = 0) -> GradientBuffer:
    """Root pulls every buffer, sums in ascending rank order, broadcasts.

    Deliberately unpipelined: this is the parameter-server baseline the
    tree and ring algorithms are measured against.
    """
    _debug_check_finite(buf)
    if not 0 <= root < ep.n_ranks:
        raise InvalidConfig(f"root {root} out of range")
    _check_same_length(ep, buf.len)
    if ep.n_ranks == 1:
        return buf

    arr = buf.data
    piece_elems = max(1, ep.max_segment // 4)
    pieces = _segment_ranges(0, buf.len, piece_elems)
    if len(pieces) >= 1 << _SEG_BITS:
        raise InvalidConfig("payload too large for the tag space")

    if ep.rank == root:
        for pi, (lo, hi) in enumerate(pieces):
            nbytes = (hi - lo) * 4
            acc = None
            for r in range(ep.n_ranks):
                if r == root:
                    piece = arr[lo:hi]
                else:
                    piece = np.frombuffer(
                        ep.pull(r, _tag(_UP, 0, pi), nbytes), dtype=np.float32
                    )
                if acc is None:
                    acc = piece.copy()
                else:
                    _kernels.add_f32(acc, piece)
            arr[lo:hi] = acc
            ep.expose(_tag(_DOWN, 0, pi), arr[lo:hi], consumers=ep.n_ranks - 1)
    else:
        for pi, (lo, hi) in enumerate(pieces):
            ep.expose(_tag(_UP, 0, pi), arr[lo:hi], consumers=1)
        # a piece is only rewritten after the root consumed its exposure:
        # the root sums piece pi from every rank before offering it down
        for pi, (lo, hi) in enumerate(pieces):
            final = ep.pull(root, _tag(_DOWN, 0, pi), (hi - lo) * 4)
            arr[lo:hi] = np.frombuffer(final, dtype=np.float32)
    return buf


def allreduce(
    ep,
    buf: GradientBuffer,
    algo: str,
    *,
    tree_set: ColorTreeSet | None = None,
    ring: RingOrder | None = None,
    root: int = 0,
    segment_elems: int = DEFAULT_SEGMENT_ELEMS,
) -> GradientBuffer:
    """Dispatch to one of the allreduce algorithms by name."""
    if algo == "multicolor":
        return allreduce_multicolor(ep, buf, tree_set, segment_elems)
    if algo == "ring":
        return allreduce_ring(ep, buf, ring, segment_elems)
    if algo == "reduce_bcast":
        return reduce_then_broadcast(ep, buf, root)
    raise InvalidConfig(f"unknown allreduce algorithm {algo!r}, expected one of {ALGORITHMS}")


# -- alltoallv -----------------------------------------------------------------


@dataclass(frozen=True)
class VarPayload:
    """Per-destination byte slices of one contiguous send buffer."""

    data: bytes
    offsets: tuple[int, ...]
    lengths: tuple[int, ...]

    @classmethod
    def from_slices(cls, slices) -> VarPayload:
        """Build from one bytes-like slice per destination rank."""
        offsets, lengths, pos = [], [], 0
        for s in slices:
            offsets.append(pos)
            lengths.append(len(s))
            pos += len(s)
        return cls(b"".join(bytes(s) for s in slices), tuple(offsets), tuple(lengths))

    def slice_for(self, rank: int) -> memoryview:
        off = self.offsets[rank]
        return memoryview(self.data)[off : off + self.lengths[rank]]

    def validate(self, n_ranks: int) -> None:
        if len(self.offsets) != n_ranks or len(self.lengths) != n_ranks:
            raise LengthMismatch(
                f"need {n_ranks} offset/length entries, got "
                f"{len(self.offsets)}/{len(self.lengths)}"
            )
        for ln in self.lengths:
            if ln < 0:
                raise LengthMismatch(f"negative slice length {ln}")
            if ln >= _MAX_SLICE:
                raise OffsetOverflow(f"slice of {ln} bytes exceeds the 32-bit limit")
        pos = 0
        for off, ln in zip(self.offsets, self.lengths):
            if off < pos or off + ln > len(self.data):
                raise LengthMismatch("offsets/lengths are not disjoint in-order slices")
            pos = off + ln


def alltoallv(ep, send: VarPayload) -> VarPayload:
    """Variable-length personalized exchange, received data ordered by
    source rank. Peers are paired round-robin by (rank XOR round)."""
    send.validate(ep.n_ranks)
    n, me = ep.n_ranks, ep.rank
    parts: list[bytes] = [b""] * n
    parts[me] = bytes(send.slice_for(me))
    recv_lens = [0] * n
    recv_lens[me] = send.lengths[me]

    rounds = 1 << max(0, (n - 1).bit_length())
    peers = [me ^ rnd for rnd in range(1, rounds)]
    for peer in peers:
        if peer >= n:
            continue
        ep.send(peer, _A2A_LEN_TAG, _HDR.pack(send.lengths[peer]))
    for peer in peers:
        if peer >= n:
            continue
        recv_lens[peer] = _HDR.unpack(ep.recv(peer, _A2A_LEN_TAG))[0]

    for peer in peers:
        if peer >= n:
            continue
        out = send.slice_for(peer)
        out_chunks = [
            out[pos : pos + ep.max_segment] for pos in range(0, len(out), ep.max_segment)
        ]
        n_in = -(-recv_lens[peer] // ep.max_segment)
        got: list[bytes] = []
        si = 0
        # alternate send/recv so neither side can fill the other's window
        while si < len(out_chunks) or len(got) < n_in:
            if si < len(out_chunks):
                ep.send(peer, _A2A_DATA_TAG, out_chunks[si])
                si += 1
            if len(got) < n_in:
                got.append(ep.recv(peer, _A2A_DATA_TAG))
        blob = b"".join(got)
        if len(blob) != recv_lens[peer]:
            raise LengthMismatch(
                f"rank {peer} announced {recv_lens[peer]} bytes but sent {len(blob)}"
            )
        parts[peer] = blob

    offsets, lengths, pos = [], [], 0
    for blob in parts:
        offsets.append(pos)
        lengths.append(len(blob))
        pos += len(blob)
    return VarPayload(b"".join(parts), tuple(offsets), tuple(lengths))
