"""Shared point-to-point machinery used by every transport backend.

A backend supplies delivery and waiting; this module supplies the
pieces that must behave identically everywhere: tag-matched receive
queues, pull (exposed-buffer read) bookkeeping, per-channel in-flight
accounting for backpressure, and the wire-framing constants.

Pulls ride on ordinary messages: a request is a zero-byte message with
bit 30 set on the tag, the reply carries the exposed bytes with bit 31
set. User tags must stay below 2^30 so both fit a 32-bit tag field.
"""

from __future__ import annotations

import ctypes
import os
from collections import deque
from dataclasses import dataclass

from minidist.errors import InvalidConfig, LengthMismatch

MAX_TAG = 1 << 30
REQ_BIT = 1 << 30
REP_BIT = 1 << 31

DEFAULT_MAX_SEGMENT = 4 * 1024 * 1024
DEFAULT_INFLIGHT = 16
DEFAULT_PULL_TIMEOUT = 30.0


def _tune_allocator() -> bool:
    """Stop glibc from returning freed pages to the kernel.

    Message payloads and exposure snapshots churn through short-lived
    buffers in the 64 KiB..4 MiB range. With default trim/mmap
    thresholds every such burst re-faults its pages, which dwarfs the
    actual copies on virtualized hosts. MPI runtimes apply the same
    tuning. Set MINIDIST_NO_MALLOC_TUNING=1 to skip; non-glibc
    platforms skip on their own.
    """
    if os.environ.get("MINIDIST_NO_MALLOC_TUNING") == "1":
        return False
    try:
        libc = ctypes.CDLL(None, use_errno=True)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = (ctypes.c_int, ctypes.c_int)
    mallopt.restype = ctypes.c_int
    M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
    ok = mallopt(M_TRIM_THRESHOLD, 1 << 30)
    ok &= mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024)
    return bool(ok)


_ALLOCATOR_TUNED = _tune_allocator()


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    tag: int
    payload: bytes


class Future:
    """One-shot completion handle. Wait via the endpoint, then result()."""

    __slots__ = ("_done", "_value", "_error", "expected_len", "key")

    def __init__(self, expected_len: int = -1):
        self._done = False
        self._value: bytes | None = None
        self._error: BaseException | None = None
        self.expected_len = expected_len
        self.key: tuple[int, int] | None = None  # (src, tag) it is registered under

    def done(self) -> bool:
        return self._done

    def result(self) -> bytes:
        if not self._done:
            raise RuntimeError("result() called before completion; wait on the endpoint first")
        if self._error is not None:
            raise self._error
        assert self._value is not None
        if 0 <= self.expected_len != len(self._value):
            raise LengthMismatch(
                f"pulled {len(self._value)} bytes where {self.expected_len} were expected"
            )
        return self._value

    def _complete(self, value: bytes) -> None:
        if self._done:
            # a delivery racing a timeout cancellation is dropped;
            # completing a successfully-completed future is a bug
            assert self._error is not None, "future completed twice"
            return
        self._done = True
        self._value = value

    def _fail(self, error: BaseException) -> None:
        if self._done:
            return
        self._done = True
        self._error = error


class MailState:
    """Receive matching, exposures, and channel accounting for one rank.

    Not thread-safe by itself: the sim backend touches it from a single
    scheduler context, the threads/tcp backends wrap every call in the
    endpoint lock.
    """

    def __init__(self):
        self.queues: dict[tuple[int, int], deque[bytes]] = {}
        self.waiters: dict[tuple[int, int], deque[Future]] = {}
        self.exposures: dict[int, list] = {}  # tag -> [payload, consumers_left]
        self.pending_pulls: dict[int, deque[int]] = {}  # tag -> requester ranks
        self.inflight: dict[tuple[int, int], int] = {}  # (src, tag) -> unconsumed count

    # -- in-flight accounting (user messages only, see deliver) --

    def add_inflight(self, src: int, tag: int) -> None:
        key = (src, tag)
        self.inflight[key] = self.inflight.get(key, 0) + 1

    def inflight_count(self, src: int, tag: int) -> int:
        return self.inflight.get((src, tag), 0)

    def _consume(self, key: tuple[int, int]) -> None:
        n = self.inflight.get(key, 0)
        if n > 1:
            self.inflight[key] = n - 1
        else:
            self.inflight.pop(key, None)

    # -- receive matching --

    def deliver(self, src: int, tag: int, payload: bytes) -> bool:
        """Hand a message to a waiter (True) or queue it (False)."""
        key = (src, tag)
        ws = self.waiters.get(key)
        if ws:
            fut = ws.popleft()
            if not ws:
                del self.waiters[key]
            if tag < MAX_TAG:
                self._consume(key)
            fut._complete(payload)
            return True
        self.queues.setdefault(key, deque()).append(payload)
        return False

    def register(self, src: int, tag: int, expected_len: int = -1) -> Future:
        """Create a future for the next message on (src, tag)."""
        fut = Future(expected_len)
        key = (src, tag)
        fut.key = key
        q = self.queues.get(key)
        if q:
            payload = q.popleft()
            if not q:
                del self.queues[key]
            if tag < MAX_TAG:
                self._consume(key)
            fut._complete(payload)
        else:
            self.waiters.setdefault(key, deque()).append(fut)
        return fut

    def cancel(self, fut: Future) -> None:
        """Drop a registered waiter (timeout path); no-op if absent."""
        if fut.key is None:
            return
        ws = self.waiters.get(fut.key)
        if not ws:
            return
        try:
            ws.remove(fut)
        except ValueError:
            return
        if not ws:
            del self.waiters[fut.key]

    # -- pull bookkeeping (owner side) --

    def expose(self, tag: int, payload: bytes, consumers: int) -> list[int]:
        """Register an exposure; returns requesters to serve right now."""
        assert consumers >= 1
        served = []
        pend = self.pending_pulls.get(tag)
        while pend and consumers > 0:
            served.append(pend.popleft())
            consumers -= 1
        if pend is not None and not pend:
            del self.pending_pulls[tag]
        if consumers > 0:
            # the collectives barrier on entry, so a live duplicate tag
            # is a protocol bug, not a user error
            assert tag not in self.exposures, f"tag {tag} exposed twice"
            self.exposures[tag] = [payload, consumers]
        return served

    def take_pull_request(self, requester: int, tag: int) -> bytes | None:
        """Serve a pull request, or park it until expose (returns None)."""
        entry = self.exposures.get(tag)
        if entry is None:
            self.pending_pulls.setdefault(tag, deque()).append(requester)
            return None
        entry[1] -= 1
        payload = entry[0]
        if entry[1] == 0:
            del self.exposures[tag]
        return payload

    def fail_all(self, error: BaseException) -> None:
        for ws in self.waiters.values():
            for fut in ws:
                fut._fail(error)
        self.waiters.clear()


def as_payload(data) -> bytes | bytearray | memoryview:
    """Normalize a payload to bytes or a flat read-only byte view.

    Buffer-protocol objects (numpy arrays, memoryviews) are wrapped,
    never copied, so exposing a large array slice costs nothing. The
    caller must leave the region unchanged until every consumer has
    received it; pass bytes for a stable snapshot.
    """
    if isinstance(data, (bytes, bytearray)):
        return data
    view = memoryview(data)
    if view.ndim != 1 or view.format != "B":
        view = view.cast("B")
    return view.toreadonly()


def check_send_args(ep, dst: int, tag: int, payload) -> None:
    if not 0 <= dst < ep.n_ranks:
        raise InvalidConfig(f"destination {dst} out of range for {ep.n_ranks} ranks")
    if dst == ep.rank:
        raise InvalidConfig("self-send is not supported; copy locally instead")
    if not 0 <= tag < MAX_TAG:
        raise InvalidConfig(f"tag {tag} outside [0, 2^30)")
    if len(payload) > ep.max_segment:
        raise InvalidConfig(
            f"payload of {len(payload)} bytes exceeds max segment {ep.max_segment}"
        )


def check_expose_args(ep, tag: int, payload) -> None:
    if not 0 <= tag < MAX_TAG:
        raise InvalidConfig(f"tag {tag} outside [0, 2^30)")
    if len(payload) > ep.max_segment:
        raise InvalidConfig(
            f"exposure of {len(payload)} bytes exceeds max segment {ep.max_segment}"
        )


class SubCommunicator:
    """A rank-translated view of an endpoint over a subset of ranks.

    Collectives written against the endpoint surface work unchanged on
    the subset; messages never leave the member set, so tags need no
    extra namespacing.
    """

    def __init__(self, ep, members):
        members = tuple(members)
        if len(set(members)) != len(members):
            raise InvalidConfig("duplicate ranks in subcommunicator")
        if ep.rank not in members:
            raise InvalidConfig(f"rank {ep.rank} is not a member of {members}")
        for m in members:
            if not 0 <= m < ep.n_ranks:
                raise InvalidConfig(f"member {m} out of range")
        self._ep = ep
        self.members = members
        self.rank = members.index(ep.rank)
        self.n_ranks = len(members)
        self.max_segment = ep.max_segment

    def send(self, dst, tag, payload):
        self._ep.send(self.members[dst], tag, payload)

    def recv(self, src, tag):
        return self._ep.recv(self.members[src], tag)

    def recv_async(self, src, tag):
        return self._ep.recv_async(self.members[src], tag)

    def expose(self, tag, payload, consumers=1):
        self._ep.expose(tag, payload, consumers)

    def pull(self, src, tag, expected_len=-1):
        return self._ep.pull(self.members[src], tag, expected_len)

    def pull_async(self, src, tag, expected_len=-1):
        return self._ep.pull_async(self.members[src], tag, expected_len)

    def wait_any(self, futures):
        self._ep.wait_any(futures)

    def now(self):
        return self._ep.now()

    def compute(self, seconds):
        self._ep.compute(seconds)
