"""Benchmark runners and the CSV they emit.

Timing on the simnet backend is virtual (deterministic, so identical
invocations produce identical CSV bytes); on the threads and tcp
backends it is wall-clock. Every timed allreduce configuration first
runs one correctness pass against a float64 reference; configurations
that fail it, or that cannot be constructed at all, are skipped with a
logged reason instead of producing a row.

Throughput uses the bus-bandwidth convention
2 * payload * (n - 1) / n / time, the standard way to compare allreduce
algorithms independently of rank count.
"""

from __future__ import annotations

import hashlib
import logging
import statistics
import time
from dataclasses import dataclass

import numpy as np

from minidist import _kernels
from minidist.collectives import GradientBuffer, allreduce
from minidist.dimd import Record, build_blob, parse_index, shard_from_bytes, shuffle_group
from minidist.errors import InvalidConfig, IoError, FormatError, MinidistError
from minidist.sgd import TrainConfig, make_synthetic_corpus, metrics_csv, run_training
from minidist.topology import (
    ColorTreeSet,
    build_multicolor_trees,
    build_ring,
    tree_set_to_json,
)
from minidist.transport.runner import run_ranks
from minidist.transport.sim import SimNetwork

log = logging.getLogger(__name__)

CSV_HEADER = "scenario,algorithm,n_ranks,payload_bytes,median_time_s,throughput_GBps,backend"

SCENARIOS = ("allreduce", "shuffle", "train", "kernels")

# sweep used when the caller does not pick payloads: 4 KiB to 256 MiB
DEFAULT_PAYLOADS = tuple(4 * 1024 * 16**i for i in range(5))


@dataclass(frozen=True)
class BenchSpec:
    """One benchmark request; unused fields are ignored per scenario."""

    scenario: str
    algorithms: tuple[str, ...] = ("multicolor", "ring", "reduce_bcast")
    rank_sweep: tuple[int, ...] = (16,)
    k_colors: int = 4
    arity: int = 4
    payload_bytes: tuple[int, ...] = DEFAULT_PAYLOADS
    backend: str = "sim"
    repetitions: int = 3
    seed: int = 0
    latency_s: float = 1.5e-6
    bandwidth_Bps: float = 12.5e9
    pods: int = 1
    # shuffle scenario
    groups: tuple[int, ...] = (1,)
    corpus_records: int = 4096
    record_bytes: int = 4096
    segments: int | None = None
    # train scenario
    train_epochs: int = 3
    train_workers: int = 2
    train_batch: int = 8
    train_hidden: int = 2048
    train_records: int = 4096
    compute_per_sample: float = 1e-6

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidConfig(
                f"unknown scenario {self.scenario!r}, expected one of {SCENARIOS}"
            )
        if self.repetitions < 3:
            raise InvalidConfig(
                f"repetitions must be >= 3 for stable medians, got {self.repetitions}"
            )
        if not self.rank_sweep or not self.payload_bytes or not self.groups:
            raise InvalidConfig("sweeps must be non-empty")
        if any(n < 1 for n in self.rank_sweep):
            raise InvalidConfig("rank counts must be >= 1")
        if any(p < 0 for p in self.payload_bytes):
            raise InvalidConfig("payload sizes must be >= 0")

    def network(self) -> SimNetwork | None:
        """Fresh simnet for one run; a network binds to a single run's size."""
        if self.backend != "sim":
            return None
        return SimNetwork(
            link_latency=self.latency_s,
            link_bandwidth=self.bandwidth_Bps,
            pods=self.pods,
        )


@dataclass(frozen=True)
class BenchRow:
    scenario: str
    algorithm: str
    n_ranks: int
    payload_bytes: int
    median_time_s: float
    throughput_GBps: float
    backend: str


def bus_bandwidth_GBps(payload_bytes: int, n_ranks: int, seconds: float) -> float:
    if payload_bytes == 0 or n_ranks < 2 or seconds <= 0:
        return 0.0
    return 2 * payload_bytes * (n_ranks - 1) / n_ranks / seconds / 1e9


# -- CSV -----------------------------------------------------------------------


def rows_to_csv(rows: list[BenchRow]) -> str:
    """Fixed-schema CSV; float fields use repr so parsing round-trips."""
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.scenario},{r.algorithm},{r.n_ranks},{r.payload_bytes},"
            f"{r.median_time_s!r},{r.throughput_GBps!r},{r.backend}"
        )
    return "\n".join(lines) + "\n"


def emit_csv(rows: list[BenchRow], path) -> None:
    try:
        with open(path, "w") as f:
            f.write(rows_to_csv(rows))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_csv(path) -> list[BenchRow]:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise FormatError(f"{path}: missing benchmark CSV header")
    rows = []
    for ln in lines[1:]:
        if not ln:
            continue
        parts = ln.split(",")
        if len(parts) != 7:
            raise FormatError(f"{path}: expected 7 fields, got {len(parts)}: {ln!r}")
        rows.append(
            BenchRow(
                scenario=parts[0],
                algorithm=parts[1],
                n_ranks=int(parts[2]),
                payload_bytes=int(parts[3]),
                median_time_s=float(parts[4]),
                throughput_GBps=float(parts[5]),
                backend=parts[6],
            )
        )
    return rows


def dump_topology(ts: ColorTreeSet, path) -> None:
    try:
        with open(path, "w") as f:
            f.write(tree_set_to_json(ts))
            f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


# -- allreduce -----------------------------------------------------------------

_FILL_CHUNK = 1 << 22  # elements per fill slice, keeps temporaries small


def _fill_rank_input(view: np.ndarray, rank: int, n_ranks: int) -> None:
    """Deterministic per-rank pattern with a cheap closed-form sum."""
    scale = (rank + 1) * np.pi / n_ranks
    n = view.shape[0]
    for lo in range(0, n, _FILL_CHUNK):
        hi = min(lo + _FILL_CHUNK, n)
        idx = np.arange(lo, hi, dtype=np.float64)
        view[lo:hi] = ((idx % 997.0 + 1.0) * scale).astype(np.float32)


def _expected_at(indices: np.ndarray, n_ranks: int) -> np.ndarray:
    total = sum((r + 1) * np.pi / n_ranks for r in range(n_ranks))
    return (indices.astype(np.float64) % 997.0 + 1.0) * total


def _check_result(view: np.ndarray, n_ranks: int) -> float:
    """Max relative error against the float64 reference, sampled."""
    n = view.shape[0]
    if n == 0:
        return 0.0
    stride = max(1, n // (1 << 20))
    idx = np.arange(0, n, stride)
    exp = _expected_at(idx, n_ranks)
    got = view[idx].astype(np.float64)
    return float(np.max(np.abs(got - exp) / np.abs(exp)))


def bench_allreduce(spec: BenchSpec) -> list[BenchRow]:
    if spec.scenario != "allreduce":
        raise InvalidConfig(f"spec is for {spec.scenario!r}")
    rows: list[BenchRow] = []
    max_elems = max(spec.payload_bytes) // 4
    for n_ranks in spec.rank_sweep:
        pool = [GradientBuffer.alloc(max_elems) for _ in range(n_ranks)]
        for algo in spec.algorithms:
            tree_set = None
            ring = None
            try:
                if algo == "multicolor" and n_ranks > 1:
                    tree_set = build_multicolor_trees(n_ranks, spec.k_colors, spec.arity)
                elif algo == "ring" and n_ranks > 1:
                    ring = build_ring(n_ranks)
            except MinidistError as e:
                log.warning("skipping %s at n=%d: %s", algo, n_ranks, e)
                continue
            for payload in spec.payload_bytes:
                n_elems = payload // 4
                actual_bytes = n_elems * 4

                def one_run(check: bool):
                    for r in range(n_ranks):
                        _fill_rank_input(pool[r].data[:n_elems], r, n_ranks)

                    def program(ep):
                        buf = GradientBuffer(pool[ep.rank].data[:n_elems])
                        t0 = time.perf_counter()
                        out = allreduce(
                            ep, buf, algo, tree_set=tree_set, ring=ring
                        )
                        elapsed = time.perf_counter() - t0
                        digest = hashlib.blake2b(
                            memoryview(out.data).cast("B"), digest_size=8
                        ).digest()
                        rel = _check_result(out.data, ep.n_ranks) if check else 0.0
                        return elapsed, digest, rel

                    return run_ranks(
                        n_ranks, spec.backend, program, network=spec.network()
                    )

                try:
                    rr = one_run(check=True)
                    digests = {d for _, d, _ in rr.results}
                    worst = max(rel for _, _, rel in rr.results)
                    if len(digests) != 1 or worst > 1e-5:
                        log.warning(
                            "skipping %s n=%d payload=%d: result check failed "
                            "(max rel %.3g, %d distinct outputs)",
                            algo, n_ranks, payload, worst, len(digests),
                        )
                        continue
                    times = []
                    for _ in range(spec.repetitions):
                        rr = one_run(check=False)
                        if spec.backend == "sim":
                            times.append(rr.virtual_time)
                        else:
                            times.append(max(t for t, _, _ in rr.results))
                except MinidistError as e:
                    log.warning(
                        "skipping %s n=%d payload=%d: %s", algo, n_ranks, payload, e
                    )
                    continue
                med = statistics.median(times)
                rows.append(
                    BenchRow(
                        scenario="allreduce",
                        algorithm=algo,
                        n_ranks=n_ranks,
                        payload_bytes=actual_bytes,
                        median_time_s=med,
                        throughput_GBps=bus_bandwidth_GBps(actual_bytes, n_ranks, med),
                        backend=spec.backend,
                    )
                )
        del pool
    return rows


# -- shuffle -------------------------------------------------------------------


def _synthetic_store_corpus(spec: BenchSpec) -> tuple[bytes, list]:
    rng = np.random.default_rng(spec.seed)
    recs = [
        Record(rng.integers(0, 256, size=spec.record_bytes, dtype=np.uint8).tobytes(),
               int(rng.integers(0, 1 << 16)))
        for _ in range(spec.corpus_records)
    ]
    blob, index = build_blob(recs)
    return blob, parse_index(index)


def bench_shuffle(spec: BenchSpec) -> list[BenchRow]:
    """Shuffle time and mean resident shard bytes per (rank count, groups).

    The corpus total is fixed across the sweep. Every group holds one
    full copy striped over its members, so with one group (fully
    partitioned) doubling the rank count halves the per-rank resident
    bytes; more groups mean more replication. The `payload_bytes`
    column records the measured mean resident shard size.
    """
    if spec.scenario != "shuffle":
        raise InvalidConfig(f"spec is for {spec.scenario!r}")
    blob, entries = _synthetic_store_corpus(spec)
    rows: list[BenchRow] = []
    for n_ranks in spec.rank_sweep:
        for g in spec.groups:
            if n_ranks % g != 0:
                log.warning("skipping groups=%d: does not divide %d ranks", g, n_ranks)
                continue
            group_size = n_ranks // g

            def make_program(shuffle_seed: int):
                def program(ep):
                    store = shard_from_bytes(
                        blob, entries, ep.rank, ep.n_ranks, group_size
                    )
                    resident = store.nbytes
                    shuffle_group(
                        ep, store, m_segments=spec.segments, seed=shuffle_seed
                    )
                    return resident

                return program

            times = []
            resident = 0
            try:
                for rep in range(spec.repetitions):
                    rr = run_ranks(
                        n_ranks,
                        spec.backend,
                        make_program(spec.seed + rep),
                        network=spec.network(),
                    )
                    resident = sum(rr.results) // n_ranks
                    if spec.backend == "sim":
                        times.append(rr.virtual_time)
                    else:
                        times.append(rr.wall_time)
            except MinidistError as e:
                log.warning("skipping shuffle n=%d groups=%d: %s", n_ranks, g, e)
                continue
            rows.append(
                BenchRow(
                    scenario="shuffle",
                    algorithm=f"shuffle-g{g}",
                    n_ranks=n_ranks,
                    payload_bytes=resident,
                    median_time_s=statistics.median(times),
                    throughput_GBps=0.0,
                    backend=spec.backend,
                )
            )
    return rows


# -- training ------------------------------------------------------------------


def bench_train(spec: BenchSpec) -> tuple[list[BenchRow], dict[tuple[str, int], str]]:
    """Median per-epoch time per (algorithm, rank count).

    Also returns each run's per-step metrics stream keyed by
    (algorithm, n_ranks). Epochs are the repeat unit: each run times
    every epoch and the row reports their median.
    """
    if spec.scenario != "train":
        raise InvalidConfig(f"spec is for {spec.scenario!r}")
    corpus = make_synthetic_corpus(spec.train_records, seed=spec.seed)
    rows: list[BenchRow] = []
    metrics: dict[tuple[str, int], str] = {}
    for algo in spec.algorithms:
        for n_ranks in spec.rank_sweep:
            cfg = TrainConfig(
                n_nodes=n_ranks,
                workers_per_node=spec.train_workers,
                per_worker_batch=spec.train_batch,
                epochs=spec.train_epochs,
                seed=spec.seed,
                hidden=spec.train_hidden,
                sim_compute_per_sample=spec.compute_per_sample,
            )
            try:
                res = run_training(
                    cfg, corpus, algo, backend=spec.backend, network=spec.network()
                )
            except MinidistError as e:
                log.warning("skipping train %s n=%d: %s", algo, n_ranks, e)
                continue
            grad_bytes = (len(res.weights) + 2) * 4
            rows.append(
                BenchRow(
                    scenario="train",
                    algorithm=algo,
                    n_ranks=n_ranks,
                    payload_bytes=grad_bytes,
                    median_time_s=statistics.median(h.time_s for h in res.history),
                    throughput_GBps=0.0,
                    backend=spec.backend,
                )
            )
            metrics[(algo, n_ranks)] = metrics_csv(res)
    return rows, metrics


def scaling_efficiency(rows: list[BenchRow]) -> dict[str, dict[int, float]]:
    """T_ref*N_ref / (T_N*N) per algorithm, ref = smallest rank count."""
    out: dict[str, dict[int, float]] = {}
    by_algo: dict[str, list[BenchRow]] = {}
    for r in rows:
        if r.scenario == "train":
            by_algo.setdefault(r.algorithm, []).append(r)
    for algo, rs in by_algo.items():
        rs = sorted(rs, key=lambda r: r.n_ranks)
        ref = rs[0]
        out[algo] = {
            r.n_ranks: ref.median_time_s * ref.n_ranks / (r.median_time_s * r.n_ranks)
            for r in rs
        }
    return out


# -- kernels -------------------------------------------------------------------


def bench_kernels(
    sizes: tuple[int, ...] = (1 << 12, 1 << 16, 1 << 20, 1 << 24),
    repetitions: int = 5,
    seed: int = 0,
) -> list[BenchRow]:
    """Compare every available kernel implementation on hot loops.

    Throughput counts 3 float32 accesses per element (two reads, one
    write). Rows use backend "local" since no transport is involved.
    """
    if repetitions < 3:
        raise InvalidConfig(f"repetitions must be >= 3, got {repetitions}")
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    for n in sizes:
        dst = rng.standard_normal(n).astype(np.float32)
        src = rng.standard_normal(n).astype(np.float32)
        for name, impl in _kernels.available_impls().items():
            for op_name, run in (
                ("add_f32", lambda: impl.add_f32(dst, src)),
                ("sub_scaled_f32", lambda: impl.sub_scaled_f32(dst, src, 0.5)),
            ):
                run()  # warm caches and code paths
                times = []
                for _ in range(repetitions):
                    t0 = time.perf_counter()
                    run()
                    times.append(time.perf_counter() - t0)
                med = statistics.median(times)
                rows.append(
                    BenchRow(
                        scenario="kernels",
                        algorithm=f"{name}:{op_name}",
                        n_ranks=1,
                        payload_bytes=n * 4,
                        median_time_s=med,
                        throughput_GBps=3 * n * 4 / med / 1e9 if med > 0 else 0.0,
                        backend="local",
                    )
                )
    return rows
