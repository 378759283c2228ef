"""TCP socket backend.

Wire frame, little-endian: 8-byte payload length, 4-byte src, 4-byte
dst, 4-byte tag, then the payload. Rendezvous is a host:port table,
one line per rank; the in-process runner builds it from ephemeral
loopback listeners. Rank i accepts connections from every higher rank
and dials every lower one, yielding one full-duplex socket per pair; a
reader thread per socket dispatches into the same mail state the
threads backend uses. Backpressure rides on kernel socket flow
control rather than a user-space window.
"""

from __future__ import annotations

import socket
import struct
import threading
import time

from minidist.errors import Closed, InvalidConfig, NotExposed, PeerUnreachable
from minidist.transport import base

HEADER = struct.Struct("<QIII")
_HELLO = struct.Struct("<I")
_CONNECT_DEADLINE = 10.0


def parse_rendezvous(text: str) -> list[tuple[str, int]]:
    """Parse a host:port-per-line rendezvous table."""
    addrs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        host, sep, port = line.rpartition(":")
        if not sep or not host:
            raise InvalidConfig(f"rendezvous line {lineno}: expected host:port, got {line!r}")
        try:
            addrs.append((host, int(port)))
        except ValueError:
            raise InvalidConfig(f"rendezvous line {lineno}: bad port in {line!r}") from None
    if not addrs:
        raise InvalidConfig("rendezvous table is empty")
    return addrs


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except OSError:
            return None
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


class TcpEndpoint:
    def __init__(
        self,
        rank: int,
        addrs: list[tuple[str, int]],
        listener: socket.socket,
        *,
        max_segment: int = base.DEFAULT_MAX_SEGMENT,
        pull_timeout: float = base.DEFAULT_PULL_TIMEOUT,
    ):
        self.rank = rank
        self.n_ranks = len(addrs)
        self.max_segment = max_segment
        self._addrs = addrs
        self._listener = listener
        self._pull_timeout = pull_timeout
        self._mail = base.MailState()
        self._cond = threading.Condition()
        self._closed = False
        self._conns: dict[int, socket.socket] = {}
        self._write_locks: dict[int, threading.Lock] = {}
        self._readers: list[threading.Thread] = []

    # -- mesh construction --

    def start(self) -> None:
        """Dial lower ranks, accept higher ranks, start reader threads."""
        expect_accepts = self.n_ranks - 1 - self.rank
        accept_err: list[BaseException] = []

        def acceptor():
            try:
                for _ in range(expect_accepts):
                    conn, _ = self._listener.accept()
                    hello = _read_exact(conn, _HELLO.size)
                    if hello is None:
                        raise PeerUnreachable("peer hung up during handshake")
                    (peer,) = _HELLO.unpack(hello)
                    self._adopt(peer, conn)
            except BaseException as e:  # noqa: BLE001 - surfaced by start()
                accept_err.append(e)

        acc = threading.Thread(target=acceptor, daemon=True)
        acc.start()
        for peer in range(self.rank):
            self._adopt(peer, self._dial(peer))
        acc.join()
        if accept_err:
            raise accept_err[0]
        self._listener.close()

    def _dial(self, peer: int) -> socket.socket:
        deadline = time.monotonic() + _CONNECT_DEADLINE
        last: Exception | None = None
        while time.monotonic() < deadline:
            try:
                sock = socket.create_connection(self._addrs[peer], timeout=1.0)
                sock.settimeout(None)
                sock.sendall(_HELLO.pack(self.rank))
                return sock
            except OSError as e:
                last = e
                time.sleep(0.02)
        raise PeerUnreachable(f"rank {self.rank} could not reach rank {peer}: {last}")

    def _adopt(self, peer: int, sock: socket.socket) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        with self._cond:
            self._conns[peer] = sock
            self._write_locks[peer] = threading.Lock()
        reader = threading.Thread(target=self._read_loop, args=(peer, sock), daemon=True)
        reader.start()
        self._readers.append(reader)

    # -- frame I/O --

    def _write_frame(self, peer: int, tag: int, payload) -> None:
        sock = self._conns.get(peer)
        lock = self._write_locks.get(peer)
        if sock is None or lock is None:
            raise PeerUnreachable(f"no connection from rank {self.rank} to rank {peer}")
        hdr = HEADER.pack(len(payload), self.rank, peer, tag)
        try:
            with lock:
                # small payloads ride in the header's packet; big ones
                # go straight from the caller's buffer, no concat copy
                if len(payload) < 4096:
                    sock.sendall(hdr + bytes(payload))
                else:
                    sock.sendall(hdr)
                    sock.sendall(payload)
        except OSError as e:
            if self._closed:
                raise Closed(f"rank {self.rank} endpoint is closed") from e
            raise PeerUnreachable(f"send from {self.rank} to {peer} failed: {e}") from e

    def _read_loop(self, peer: int, sock: socket.socket) -> None:
        while True:
            hdr = _read_exact(sock, HEADER.size)
            if hdr is None:
                break
            length, src, dst, tag = HEADER.unpack(hdr)
            if dst != self.rank or src != peer:
                break  # corrupt stream; drop the connection
            payload = _read_exact(sock, length) if length else b""
            if payload is None:
                break
            self._dispatch(src, tag, payload)
        if not self._closed:
            with self._cond:
                self._cond.notify_all()

    def _dispatch(self, src: int, tag: int, payload: bytes) -> None:
        if tag & base.REQ_BIT and not tag & base.REP_BIT:
            user_tag = tag & ~base.REQ_BIT
            with self._cond:
                reply = self._mail.take_pull_request(src, user_tag)
            if reply is not None:
                self._write_frame(src, user_tag | base.REP_BIT, reply)
        else:
            with self._cond:
                self._mail.deliver(src, tag, payload)
                self._cond.notify_all()

    # -- transport surface --

    def send(self, dst: int, tag: int, payload) -> None:
        payload = base.as_payload(payload)
        base.check_send_args(self, dst, tag, payload)
        if self._closed:
            raise Closed(f"rank {self.rank} endpoint is closed")
        self._write_frame(dst, tag, payload)

    def recv_async(self, src: int, tag: int) -> base.Future:
        if not 0 <= src < self.n_ranks:
            raise InvalidConfig(f"source {src} out of range")
        with self._cond:
            if self._closed:
                raise Closed(f"rank {self.rank} endpoint is closed")
            return self._mail.register(src, tag)

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
            self._write_frame(requester, tag | base.REP_BIT, payload)

    def pull_async(self, src: int, tag: int, expected_len: int = -1) -> base.Future:
        if not 0 <= src < self.n_ranks or src == self.rank:
            raise InvalidConfig(f"pull source {src} invalid from rank {self.rank}")
        if not 0 <= tag < base.MAX_TAG:
            raise InvalidConfig(f"tag {tag} outside [0, 2^30)")
        with self._cond:
            if self._closed:
                raise Closed(f"rank {self.rank} endpoint is closed")
            fut = self._mail.register(src, tag | base.REP_BIT, expected_len)
        self._write_frame(src, tag | base.REQ_BIT, b"")
        return fut

    def pull(self, src: int, tag: int, expected_len: int = -1) -> bytes:
        fut = self.pull_async(src, tag, expected_len)
        self.wait_any([fut])
        return fut.result()

    def wait_any(self, futures) -> None:
        futures = list(futures)
        if not futures:
            raise InvalidConfig("wait_any needs at least one future")
        deadline = time.monotonic() + self._pull_timeout
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
                            f._fail(
                                NotExposed(f"pull on tag {f.key[1] & ~base.REP_BIT} timed out")
                            )
                        raise NotExposed(
                            f"{len(pulls)} pull(s) timed out after {self._pull_timeout}s"
                        )
                    deadline = time.monotonic() + self._pull_timeout
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
            if self._closed:
                return
            self._closed = True
            self._mail.fail_all(Closed(f"rank {self.rank} endpoint is closed"))
            self._cond.notify_all()
        for sock in self._conns.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        try:
            self._listener.close()
        except OSError:
            pass


def _bind_listeners(addrs: list[tuple[str, int]] | None, n_ranks: int):
    """Bind one listener per rank; ephemeral loopback ports if no table."""
    listeners = []
    resolved = []
    try:
        for r in range(n_ranks):
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind(addrs[r] if addrs is not None else ("127.0.0.1", 0))
            sock.listen(n_ranks)
            listeners.append(sock)
            resolved.append(sock.getsockname()[:2])
    except OSError as e:
        for sock in listeners:
            sock.close()
        raise PeerUnreachable(f"could not bind listener: {e}") from e
    return listeners, resolved


def run_tcp(
    n_ranks: int,
    program,
    *,
    rendezvous: list[tuple[str, int]] | None = None,
    max_segment: int = base.DEFAULT_MAX_SEGMENT,
    pull_timeout: float = base.DEFAULT_PULL_TIMEOUT,
) -> list:
    if n_ranks < 1:
        raise InvalidConfig(f"need at least 1 rank, got {n_ranks}")
    if rendezvous is not None and len(rendezvous) != n_ranks:
        raise InvalidConfig(
            f"rendezvous table has {len(rendezvous)} entries for {n_ranks} ranks"
        )
    listeners, addrs = _bind_listeners(rendezvous, n_ranks)
    endpoints = [
        TcpEndpoint(r, addrs, listeners[r], max_segment=max_segment, pull_timeout=pull_timeout)
        for r in range(n_ranks)
    ]
    results: list = [None] * n_ranks
    errors: list = [None] * n_ranks

    def main(rank: int):
        try:
            endpoints[rank].start()
            results[rank] = program(endpoints[rank])
        except BaseException as e:  # noqa: BLE001 - re-raised below
            errors[rank] = e
            for ep in endpoints:
                ep.close()

    threads = [threading.Thread(target=main, args=(r,), daemon=True) for r in range(n_ranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for ep in endpoints:
        ep.close()

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
