"""In-process threaded backend: one OS thread per rank.

Unlike the simulator this runs ranks genuinely in parallel; delivery is
a direct handoff into the destination endpoint's mail state under that
endpoint's lock. Backpressure blocks the sender in the destination's
condition variable until the channel's unconsumed count drops below
the budget.
"""

from __future__ import annotations

import threading
import time

from minidist.errors import Closed, InvalidConfig, NotExposed
from minidist.transport import base


class ThreadEndpoint:
    def __init__(self, world: _ThreadWorld, rank: int):
        self._world = world
        self.rank = rank
        self.n_ranks = world.n_ranks
        self.max_segment = world.max_segment
        self._mail = base.MailState()
        self._cond = threading.Condition()
        self._closed = False

    # -- delivery entry points, called from peer threads --

    def _deliver_data(self, src: int, tag: int, payload: bytes) -> None:
        budget = self._world.inflight_budget
        with self._cond:
            while not self._closed and self._mail.inflight_count(src, tag) >= budget:
                self._cond.wait(0.1)
            if self._closed:
                raise Closed(f"rank {self.rank} endpoint is closed")
            self._mail.add_inflight(src, tag)
            self._mail.deliver(src, tag, payload)
            self._cond.notify_all()

    def _deliver_pull_request(self, src: int, tag: int) -> None:
        with self._cond:
            if self._closed:
                raise Closed(f"rank {self.rank} endpoint is closed")
            payload = self._mail.take_pull_request(src, tag)
        if payload is not None:
            self._world.endpoints[src]._deliver_reply(self.rank, tag, payload)

    def _deliver_reply(self, owner: int, tag: int, payload: bytes) -> None:
        with self._cond:
            self._mail.deliver(owner, tag | base.REP_BIT, payload)
            self._cond.notify_all()

    # -- transport surface --

    def send(self, dst: int, tag: int, payload) -> None:
        payload = base.as_payload(payload)
        base.check_send_args(self, dst, tag, payload)
        if self._closed:
            raise Closed(f"rank {self.rank} endpoint is closed")
        self._world.endpoints[dst]._deliver_data(self.rank, tag, payload)

    def recv_async(self, src: int, tag: int) -> base.Future:
        if not 0 <= src < self.n_ranks:
            raise InvalidConfig(f"source {src} out of range")
        with self._cond:
            if self._closed:
                raise Closed(f"rank {self.rank} endpoint is closed")
            fut = self._mail.register(src, tag)
            self._cond.notify_all()
        return fut

    def recv(self, src: int, tag: int) -> bytes:
        fut = self.recv_async(src, tag)
        self.wait_any([fut])
        return fut.result()

    def expose(self, tag: int, payload, consumers: int = 1) -> None:
        payload = base.as_payload(payload)
        base.check_expose_args(self, tag, payload)
        if consumers < 1:
            raise InvalidConfig(f"exposure needs >= 1 consumers, got {consumers}")
        with self._cond:
            if self._closed:
                raise Closed(f"rank {self.rank} endpoint is closed")
            served = self._mail.expose(tag, payload, consumers)
        for requester in served:
            self._world.endpoints[requester]._deliver_reply(self.rank, tag, payload)

    def pull_async(self, src: int, tag: int, expected_len: int = -1) -> base.Future:
        if not 0 <= src < self.n_ranks or src == self.rank:
            raise InvalidConfig(f"pull source {src} invalid from rank {self.rank}")
        if not 0 <= tag < base.MAX_TAG:
            raise InvalidConfig(f"tag {tag} outside [0, 2^30)")
        with self._cond:
            if self._closed:
                raise Closed(f"rank {self.rank} endpoint is closed")
            fut = self._mail.register(src, tag | base.REP_BIT, expected_len)
        self._world.endpoints[src]._deliver_pull_request(self.rank, tag)
        return fut

    def pull(self, src: int, tag: int, expected_len: int = -1) -> bytes:
        fut = self.pull_async(src, tag, expected_len)
        self.wait_any([fut])
        return fut.result()

    def wait_any(self, futures) -> None:
        futures = list(futures)
        if not futures:
            raise InvalidConfig("wait_any needs at least one future")
        deadline = time.monotonic() + self._world.pull_timeout
        with self._cond:
            while True:
                if any(f.done() for f in futures):
                    return
                if self._closed:
                    raise Closed(f"rank {self.rank} endpoint is closed")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    pulls = [
                        f for f in futures if not f.done() and f.key is not None
                        and f.key[1] & base.REP_BIT
                    ]
                    if pulls:
                        for f in pulls:
                            self._mail.cancel(f)
                            f._fail(NotExposed(f"pull on tag {f.key[1] & ~base.REP_BIT} timed out"))
                        raise NotExposed(
                            f"{len(pulls)} pull(s) timed out after {self._world.pull_timeout}s"
                        )
                    deadline = time.monotonic() + self._world.pull_timeout
                    continue
                self._cond.wait(min(remaining, 0.1))

    def now(self) -> float:
        return time.perf_counter()

    def compute(self, seconds: float) -> None:
        if seconds < 0:
            raise InvalidConfig(f"negative compute time {seconds}")
        if seconds:
            time.sleep(seconds)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._mail.fail_all(Closed(f"rank {self.rank} endpoint is closed"))
            self._cond.notify_all()


class _ThreadWorld:
    def __init__(self, n_ranks, max_segment, inflight_budget, pull_timeout):
        if n_ranks < 1:
            raise InvalidConfig(f"need at least 1 rank, got {n_ranks}")
        self.n_ranks = n_ranks
        self.max_segment = max_segment
        self.inflight_budget = inflight_budget
        self.pull_timeout = pull_timeout
        self.endpoints = [ThreadEndpoint(self, r) for r in range(n_ranks)]


def run_threads(
    n_ranks: int,
    program,
    *,
    max_segment: int = base.DEFAULT_MAX_SEGMENT,
    inflight_budget: int = base.DEFAULT_INFLIGHT,
    pull_timeout: float = base.DEFAULT_PULL_TIMEOUT,
) -> list:
    world = _ThreadWorld(n_ranks, max_segment, inflight_budget, pull_timeout)
    results: list = [None] * n_ranks
    errors: list = [None] * n_ranks

    def main(rank: int):
        try:
            results[rank] = program(world.endpoints[rank])
        except BaseException as e:  # noqa: BLE001 - re-raised below
            errors[rank] = e
            for ep in world.endpoints:
                ep.close()

    threads = [threading.Thread(target=main, args=(r,), daemon=True) for r in range(n_ranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    # prefer a root-cause error over the Closed cascade it triggers
    primary = None
    for e in errors:
        if e is not None and not isinstance(e, Closed):
            primary = e
            break
    if primary is None:
        for e in errors:
            if e is not None:
                primary = e
                break
    if primary is not None:
        raise primary
    return results
