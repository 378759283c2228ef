"""Single entry point for executing one program per rank on any backend."""

from __future__ import annotations

import time
from dataclasses import dataclass

from minidist.errors import InvalidConfig
from minidist.transport import base
from minidist.transport.sim import SimNetwork, run_sim
from minidist.transport.tcp import run_tcp
from minidist.transport.threads import run_threads

BACKENDS = ("sim", "threads", "tcp")


@dataclass(frozen=True)
class RunResult:
    """Per-rank return values plus timing for the whole run.

    virtual_time is the sim backend's final clock; None elsewhere.
    """

    results: list
    virtual_time: float | None
    wall_time: float


def run_ranks(
    n_ranks: int,
    backend: str,
    program,
    *,
    network: SimNetwork | None = None,
    rendezvous: list[tuple[str, int]] | None = None,
    max_segment: int = base.DEFAULT_MAX_SEGMENT,
    inflight_budget: int = base.DEFAULT_INFLIGHT,
    pull_timeout: float = base.DEFAULT_PULL_TIMEOUT,
) -> RunResult:
    """Run program(endpoint) once per rank and collect the results.

    The program must be deterministic given (rank, its inputs); on the
    sim backend the run is fully deterministic including the clock.
    """
    if backend not in BACKENDS:
        raise InvalidConfig(f"unknown backend {backend!r}, expected one of {BACKENDS}")
    if n_ranks < 1:
        raise InvalidConfig(f"need at least 1 rank, got {n_ranks}")
    if backend != "sim" and network is not None:
        raise InvalidConfig("a SimNetwork only makes sense with the sim backend")
    if backend != "tcp" and rendezvous is not None:
        raise InvalidConfig("a rendezvous table only makes sense with the tcp backend")

    t0 = time.perf_counter()
    virtual: float | None = None
    if backend == "sim":
        results, virtual = run_sim(
            n_ranks,
            program,
            network=network,
            max_segment=max_segment,
            inflight_budget=inflight_budget,
        )
    elif backend == "threads":
        results = run_threads(
            n_ranks,
            program,
            max_segment=max_segment,
            inflight_budget=inflight_budget,
            pull_timeout=pull_timeout,
        )
    else:
        results = run_tcp(
            n_ranks,
            program,
            rendezvous=rendezvous,
            max_segment=max_segment,
            pull_timeout=pull_timeout,
        )
    return RunResult(results, virtual, time.perf_counter() - t0)
