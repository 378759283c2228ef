"""Deterministic discrete-event network backend.

Transfers are fluid flows over a one-level fat-tree: a flow occupies
the source host's uplink and the destination host's downlink, plus a
pod uplink/downlink pair when it crosses pods. Flows sharing a link
split its bandwidth equally, and a flow's rate is the smallest share
across its links; an uncontended B-byte transfer therefore finishes in
exactly B/bandwidth, and its delivery fires one latency per traversed
link-pair after that (1 intra-pod, 2 inter-pod). Zero-byte messages
cost latency only.

The whole run lives on one OS thread: each rank program executes in
its own greenlet and switches back to the scheduler whenever it blocks
in a transport call. Events fire in (time, seq) order and the runnable
rank with the lowest id resumes first, so every run is a pure function
of its inputs: same programs, same results, same final clock.
"""

from __future__ import annotations

import heapq
from collections import deque
from functools import partial

import greenlet

from minidist.errors import Closed, DeadlockDetected, InvalidConfig
from minidist.transport import base


class SimNetwork:
    """Fat-tree parameters plus the live event state for one run."""

    def __init__(
        self,
        link_latency: float = 1.5e-6,
        link_bandwidth: float = 12.5e9,
        pods: int = 1,
        hosts: int | None = None,
    ):
        if link_latency < 0:
            raise InvalidConfig(f"negative link latency {link_latency}")
        if link_bandwidth <= 0:
            raise InvalidConfig(f"link bandwidth must be positive, got {link_bandwidth}")
        if pods < 1:
            raise InvalidConfig(f"need at least 1 pod, got {pods}")
        self.link_latency = link_latency
        self.link_bandwidth = link_bandwidth
        self.pods = pods
        self.hosts = hosts
        self.clock = 0.0
        self.event_queue: list = []
        self.flows: dict[int, _Flow] = {}
        self._in_use = False

    def bind(self, n_ranks: int) -> None:
        if self._in_use:
            raise InvalidConfig("SimNetwork is already driving a run")
        if self.hosts is not None and self.hosts != n_ranks:
            raise InvalidConfig(f"network built for {self.hosts} hosts, run asked for {n_ranks}")
        if self.pods > n_ranks:
            raise InvalidConfig(f"{self.pods} pods need at least {self.pods} hosts")
        self.hosts = n_ranks
        self.clock = 0.0
        self.event_queue = []
        self.flows = {}
        self._in_use = True

    def release(self) -> None:
        self._in_use = False

    def pod_of(self, host: int) -> int:
        return host * self.pods // self.hosts


class _Flow:
    __slots__ = ("seq", "remaining", "rate", "links", "msg", "hops", "settled_at", "epoch")

    def __init__(self, seq, remaining, links, msg, hops, settled_at):
        self.seq = seq
        self.remaining = float(remaining)
        self.rate = 0.0
        self.links = links
        self.msg = msg
        self.hops = hops
        self.settled_at = settled_at  # clock of the last remaining update
        self.epoch = 0  # bumped on every rate change; stale heap entries skip


class SimEndpoint:
    """Transport surface for one rank inside the simulator."""

    def __init__(self, sched: _Scheduler, rank: int):
        self._sched = sched
        self.rank = rank
        self.n_ranks = sched.n_ranks
        self.max_segment = sched.max_segment
        self._mail = base.MailState()

    # -- control handoff (rank greenlet side) --

    def _suspend(self, reason) -> None:
        sched = self._sched
        sched.state[self.rank] = reason
        sched.sched_glet.switch()
        if sched.abort_error is not None:
            err = sched.abort_error
            raise type(err)(str(err))
        sched.state[self.rank] = ("running",)

    def _check_abort(self) -> None:
        err = self._sched.abort_error
        if err is not None:
            raise type(err)(str(err))

    # -- transport surface --

    def send(self, dst: int, tag: int, payload) -> None:
        self._check_abort()
        payload = base.as_payload(payload)
        base.check_send_args(self, dst, tag, payload)
        target = self._sched.eps[dst]._mail
        while target.inflight_count(self.rank, tag) >= self._sched.inflight_budget:
            self._suspend(("send", dst, tag))
        target.add_inflight(self.rank, tag)
        self._sched.post_message(base.Message(self.rank, dst, tag, payload))

    def recv_async(self, src: int, tag: int) -> base.Future:
        self._check_abort()
        if not 0 <= src < self.n_ranks:
            raise InvalidConfig(f"source {src} out of range")
        return self._mail.register(src, tag)

    def recv(self, src: int, tag: int) -> bytes:
        fut = self.recv_async(src, tag)
        self.wait_any([fut])
        return fut.result()

    def expose(self, tag: int, payload, consumers: int = 1) -> None:
        self._check_abort()
        payload = base.as_payload(payload)
        base.check_expose_args(self, tag, payload)
        if consumers < 1:
            raise InvalidConfig(f"exposure needs >= 1 consumers, got {consumers}")
        for requester in self._mail.expose(tag, payload, consumers):
            self._sched.post_message(
                base.Message(self.rank, requester, tag | base.REP_BIT, payload)
            )

    def pull_async(self, src: int, tag: int, expected_len: int = -1) -> base.Future:
        self._check_abort()
        if not 0 <= src < self.n_ranks or src == self.rank:
            raise InvalidConfig(f"pull source {src} invalid from rank {self.rank}")
        if not 0 <= tag < base.MAX_TAG:
            raise InvalidConfig(f"tag {tag} outside [0, 2^30)")
        fut = self._mail.register(src, tag | base.REP_BIT, expected_len)
        self._sched.post_message(base.Message(self.rank, src, tag | base.REQ_BIT, b""))
        return fut

    def pull(self, src: int, tag: int, expected_len: int = -1) -> bytes:
        fut = self.pull_async(src, tag, expected_len)
        self.wait_any([fut])
        return fut.result()

    def wait_any(self, futures) -> None:
        self._check_abort()
        futures = list(futures)
        if not futures:
            raise InvalidConfig("wait_any needs at least one future")
        while not any(f.done() for f in futures):
            self._suspend(("wait", futures))

    def now(self) -> float:
        return self._sched.net.clock

    def compute(self, seconds: float) -> None:
        """Advance this rank's virtual time by a compute cost."""
        self._check_abort()
        if seconds < 0:
            raise InvalidConfig(f"negative compute time {seconds}")
        self._sched.schedule(self._sched.net.clock + seconds, "wake", self.rank)
        self._suspend(("sleep",))


class _Scheduler:
    def __init__(self, net: SimNetwork, n_ranks: int, max_segment: int, inflight_budget: int):
        if n_ranks < 1:
            raise InvalidConfig(f"need at least 1 rank, got {n_ranks}")
        net.bind(n_ranks)
        self.net = net
        self.n_ranks = n_ranks
        self.max_segment = max_segment
        self.inflight_budget = inflight_budget
        self.eps = [SimEndpoint(self, r) for r in range(n_ranks)]
        self.state: list = [("ready",)] * n_ranks
        self.sched_glet: greenlet.greenlet | None = None
        self._glets: list[greenlet.greenlet] = []
        self.abort_error: Exception | None = None
        self.results: list = [None] * n_ranks
        self.errors: list = [None] * n_ranks
        self.finished: list[bool] = [False] * n_ranks
        self.primary_error: Exception | None = None
        self._seq = 0
        self._busy: dict[tuple[int, int, int], deque] = {}
        self._link_count: dict = {}
        self._link_flows: dict = {}
        self._comp_heap: list = []  # (t_done, flow.seq, epoch, flow)

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    # -- event plumbing --

    def schedule(self, t: float, kind: str, data) -> None:
        heapq.heappush(self.net.event_queue, (t, self._next_seq(), kind, data))

    def post_message(self, msg: base.Message) -> None:
        """Enqueue a message; per-channel FIFO via one transmission at a time."""
        ch = (msg.src, msg.dst, msg.tag)
        q = self._busy.get(ch)
        if q is not None:
            q.append(msg)
            return
        self._busy[ch] = deque()
        self._start_transmit(msg)

    def _start_transmit(self, msg: base.Message) -> None:
        net = self.net
        hops = 1 if net.pod_of(msg.src) == net.pod_of(msg.dst) else 2
        if len(msg.payload) == 0:
            self.schedule(net.clock + hops * net.link_latency, "msg", msg)
            self._finish_transmit((msg.src, msg.dst, msg.tag))
            return
        links = [("hu", msg.src), ("hd", msg.dst)]
        if hops == 2:
            links.append(("pu", net.pod_of(msg.src)))
            links.append(("pd", net.pod_of(msg.dst)))
        flow = _Flow(self._next_seq(), len(msg.payload), links, msg, hops, net.clock)
        net.flows[flow.seq] = flow
        affected = {flow.seq: flow}
        for link in links:
            self._link_count[link] = self._link_count.get(link, 0) + 1
            peers = self._link_flows.setdefault(link, {})
            affected.update(peers)
            peers[flow.seq] = flow
        self._reprice(affected.values())

    def _finish_transmit(self, ch: tuple[int, int, int]) -> None:
        q = self._busy.get(ch)
        if q is None:
            return
        if q:
            self._start_transmit(q.popleft())
        else:
            del self._busy[ch]

    def _remove_flow(self, flow: _Flow) -> None:
        del self.net.flows[flow.seq]
        affected: dict = {}
        for link in flow.links:
            n = self._link_count[link] - 1
            peers = self._link_flows[link]
            del peers[flow.seq]
            if n == 0:
                del self._link_count[link]
                del self._link_flows[link]
            else:
                self._link_count[link] = n
                affected.update(peers)
        flow.epoch = -1
        self._reprice(affected.values())

    def _reprice(self, flows) -> None:
        """Settle remaining bytes and recompute rates after a link change.

        Only flows sharing a link with the changed flow are touched;
        everything else drains at its old rate and settles later.
        """
        now = self.net.clock
        bw = self.net.link_bandwidth
        counts = self._link_count
        for f in flows:
            dt = now - f.settled_at
            if dt > 0.0:
                f.remaining = max(0.0, f.remaining - f.rate * dt)
                f.settled_at = now
            rate = bw / max(counts[link] for link in f.links)
            if rate != f.rate:
                f.rate = rate
                f.settled_at = now
                f.epoch += 1
                heapq.heappush(
                    self._comp_heap, (now + f.remaining / rate, f.seq, f.epoch, f)
                )

    def _advance_once(self) -> bool:
        """Fire the single earliest event; False if nothing can happen."""
        net = self.net
        comp = self._comp_heap
        while comp and comp[0][2] != comp[0][3].epoch:
            heapq.heappop(comp)

        if net.event_queue:
            t0, s0 = net.event_queue[0][0], net.event_queue[0][1]
            if not comp or (t0, s0) < (comp[0][0], comp[0][1]):
                t, _, kind, data = heapq.heappop(net.event_queue)
                net.clock = t
                if kind == "msg":
                    self._deliver(data)
                else:  # wake
                    if self.state[data] == ("sleep",):
                        self.state[data] = ("ready",)
                return True

        if comp:
            t_done, _, _, flow = heapq.heappop(comp)
            net.clock = t_done
            self._remove_flow(flow)
            self.schedule(t_done + flow.hops * net.link_latency, "msg", flow.msg)
            m = flow.msg
            self._finish_transmit((m.src, m.dst, m.tag))
            return True
        return False

    def _deliver(self, msg: base.Message) -> None:
        ep = self.eps[msg.dst]
        if msg.tag & base.REQ_BIT and not msg.tag & base.REP_BIT:
            user_tag = msg.tag & ~base.REQ_BIT
            payload = ep._mail.take_pull_request(msg.src, user_tag)
            if payload is not None:
                self.post_message(
                    base.Message(msg.dst, msg.src, user_tag | base.REP_BIT, payload)
                )
        else:
            ep._mail.deliver(msg.src, msg.tag, msg.payload)

    # -- rank scheduling --

    def _pick_runnable(self) -> int | None:
        for r in range(self.n_ranks):
            if self.finished[r]:
                continue
            st = self.state[r]
            kind = st[0]
            if kind == "ready":
                return r
            if kind == "wait":
                for f in st[1]:
                    if f._done:
                        return r
            elif kind == "send":
                _, dst, tag = st
                if self.eps[dst]._mail.inflight_count(r, tag) < self.inflight_budget:
                    return r
        return None

    def _hand_to(self, r: int) -> None:
        self.state[r] = ("running",)
        self._glets[r].switch()
        if self.errors[r] is not None and self.primary_error is None:
            self.primary_error = self.errors[r]
            if self.abort_error is None:
                self.abort_error = Closed(f"rank {r} failed: {self.errors[r]}")

    def _abort_blocked(self) -> None:
        """Resume every unfinished rank so it raises and unwinds.

        Includes ranks still in their initial ready state: the rank
        wrapper checks the abort flag as its first act, so switching in
        is what lets it finish."""
        for r in range(self.n_ranks):
            while not self.finished[r]:
                self._hand_to(r)

    def run(self, program) -> list:
        def main(rank: int):
            ep = self.eps[rank]
            try:
                if self.abort_error is not None:
                    err = self.abort_error
                    raise type(err)(str(err))
                self.results[rank] = program(ep)
            except BaseException as e:  # noqa: BLE001 - recorded and re-raised by run()
                self.errors[rank] = e
            self.finished[rank] = True
            # falling off the end returns control to the parent greenlet,
            # which is the scheduler loop below

        self.sched_glet = greenlet.getcurrent()
        self._glets = [
            greenlet.greenlet(partial(main, r)) for r in range(self.n_ranks)
        ]

        try:
            while not all(self.finished):
                if self.abort_error is not None:
                    self._abort_blocked()
                    break
                r = self._pick_runnable()
                if r is not None:
                    self._hand_to(r)
                    continue
                if not self._advance_once():
                    blocked = {
                        r: self.state[r][0] for r in range(self.n_ranks) if not self.finished[r]
                    }
                    self.abort_error = DeadlockDetected(
                        f"no runnable rank, no pending events; blocked: {blocked}"
                    )
                    if self.primary_error is None:
                        self.primary_error = self.abort_error
                    self._abort_blocked()
                    break
        finally:
            self.net.release()

        if self.primary_error is not None:
            raise self.primary_error
        return self.results


def run_sim(
    n_ranks: int,
    program,
    *,
    network: SimNetwork | None = None,
    max_segment: int = base.DEFAULT_MAX_SEGMENT,
    inflight_budget: int = base.DEFAULT_INFLIGHT,
) -> tuple[list, float]:
    """Run one program per rank; returns (results, final virtual clock)."""
    net = network if network is not None else SimNetwork()
    sched = _Scheduler(net, n_ranks, max_segment, inflight_budget)
    results = sched.run(program)
    return results, net.clock
