"""Command-line entry points.

`minidist bench ...` runs the benchmark scenarios and prints (or writes
with --out) the fixed-schema CSV. `minidist topo dump` prints a tree
set as JSON. `minidist dimd ...` builds, verifies, and shuffles
dataset store files.

Sizes given to --payload accept K/M/G binary suffixes. Allreduce
throughput is bus bandwidth, 2*payload*(n-1)/n divided by the median
time, so different rank counts are comparable; it is not the raw wire
rate. Exit status: 0 on success, 1 when any requested configuration
failed, 2 on usage errors.
"""

from __future__ import annotations

import logging
import os
import sys

import click
import numpy as np

from minidist import bench as bench_mod
from minidist.bench import BenchSpec, bench_kernels, emit_csv, rows_to_csv
from minidist.dimd import (
    Record,
    build_blob,
    default_segments,
    load_partition,
    parse_index,
    shuffle_group,
)
from minidist.errors import FormatError, MinidistError
from minidist.topology import build_multicolor_trees, tree_set_to_json
from minidist.transport.runner import run_ranks


def _fail(e: MinidistError) -> None:
    click.echo(f"error: {e}", err=True)
    sys.exit(1)


def _parse_size(text: str) -> int:
    """Byte count with optional K/M/G binary suffix."""
    t = text.strip().upper()
    mult = 1
    if t and t[-1] in "KMG":
        mult = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}[t[-1]]
        t = t[:-1]
    try:
        v = int(t)
    except ValueError:
        raise click.BadParameter(f"not a size: {text!r}")
    if v < 0:
        raise click.BadParameter(f"size must be >= 0: {text!r}")
    return v * mult


def _emit(rows, out) -> None:
    if out:
        emit_csv(rows, out)
        click.echo(f"wrote {len(rows)} rows to {out}")
    else:
        click.echo(rows_to_csv(rows), nl=False)


_SIMNET_OPTS = [
    click.option("--latency-us", default=1.5, show_default=True,
                 help="Simnet per-hop latency in microseconds."),
    click.option("--bandwidth-gbps", default=100.0, show_default=True,
                 help="Simnet per-direction link rate in gigabits per second."),
    click.option("--pods", default=1, show_default=True,
                 help="Simnet pod count (hosts split evenly)."),
]


def _with(opts):
    def deco(f):
        for opt in reversed(opts):
            f = opt(f)
        return f

    return deco


@click.group()
def main():
    """Desk-scale collectives, dataset shuffle, and SGD benchmarks."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")


@main.group()
def bench():
    """Benchmark scenarios; all emit the same CSV schema."""


@bench.command("allreduce")
@click.option("--ranks", "-n", multiple=True, type=int, default=(16,),
              show_default=True, help="Rank counts to sweep (repeatable).")
@click.option("--colors", default=4, show_default=True, help="Tree colors (k).")
@click.option("--arity", default=4, show_default=True, help="Tree fan-out.")
@click.option("--algo", multiple=True,
              type=click.Choice(["multicolor", "ring", "reduce_bcast"]),
              default=("multicolor", "ring", "reduce_bcast"), show_default=True)
@click.option("--backend", type=click.Choice(["sim", "threads", "tcp"]),
              default="sim", show_default=True)
@click.option("--payload", multiple=True, metavar="SIZE",
              help="Payload bytes, K/M/G suffixes allowed (repeatable). "
                   "Default sweep: 4K to 256M.")
@click.option("--reps", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_with(_SIMNET_OPTS)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV output path.")
def bench_allreduce_cmd(ranks, colors, arity, algo, backend, payload, reps, seed,
                        latency_us, bandwidth_gbps, pods, out):
    """Time the allreduce algorithms; throughput is bus bandwidth."""
    payloads = tuple(_parse_size(p) for p in payload) or bench_mod.DEFAULT_PAYLOADS
    try:
        spec = BenchSpec(
            scenario="allreduce",
            algorithms=tuple(algo),
            rank_sweep=tuple(ranks),
            k_colors=colors,
            arity=arity,
            payload_bytes=payloads,
            backend=backend,
            repetitions=reps,
            seed=seed,
            latency_s=latency_us * 1e-6,
            bandwidth_Bps=bandwidth_gbps * 1e9 / 8,
            pods=pods,
        )
        rows = bench_mod.bench_allreduce(spec)
        _emit(rows, out)
    except MinidistError as e:
        _fail(e)


@bench.command("shuffle")
@click.option("--ranks", "-n", multiple=True, type=int, default=(8, 16),
              show_default=True, help="Rank counts to sweep (repeatable).")
@click.option("--groups", "-g", multiple=True, type=int, default=(1,),
              show_default=True, help="Shuffle group counts (repeatable).")
@click.option("--records", default=4096, show_default=True)
@click.option("--record-bytes", default=4096, show_default=True)
@click.option("--segments", type=int, default=None,
              help="Shuffle segments; default sizes them at 1 GiB per rank.")
@click.option("--backend", type=click.Choice(["sim", "threads", "tcp"]),
              default="sim", show_default=True)
@click.option("--reps", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_with(_SIMNET_OPTS)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV output path.")
def bench_shuffle_cmd(ranks, groups, records, record_bytes, segments, backend,
                      reps, seed, latency_us, bandwidth_gbps, pods, out):
    """Time the dataset shuffle; payload_bytes is resident bytes per rank."""
    try:
        spec = BenchSpec(
            scenario="shuffle",
            rank_sweep=tuple(ranks),
            groups=tuple(groups),
            corpus_records=records,
            record_bytes=record_bytes,
            segments=segments,
            backend=backend,
            repetitions=reps,
            seed=seed,
            latency_s=latency_us * 1e-6,
            bandwidth_Bps=bandwidth_gbps * 1e9 / 8,
            pods=pods,
        )
        rows = bench_mod.bench_shuffle(spec)
        _emit(rows, out)
    except MinidistError as e:
        _fail(e)


@bench.command("train")
@click.option("--ranks", "-n", multiple=True, type=int, default=(2, 4, 8),
              show_default=True, help="Node counts to sweep (repeatable).")
@click.option("--algo", multiple=True,
              type=click.Choice(["multicolor", "ring", "reduce_bcast"]),
              default=("multicolor", "ring", "reduce_bcast"), show_default=True)
@click.option("--epochs", default=3, show_default=True)
@click.option("--workers", default=2, show_default=True, help="Workers per node.")
@click.option("--batch", default=8, show_default=True, help="Samples per worker.")
@click.option("--hidden", default=2048, show_default=True,
              help="Hidden width; scales the gradient payload.")
@click.option("--compute-us", default=1.0, show_default=True,
              help="Virtual compute cost per sample, microseconds (simnet).")
@click.option("--records", default=4096, show_default=True)
@click.option("--backend", type=click.Choice(["sim", "threads", "tcp"]),
              default="sim", show_default=True)
@click.option("--reps", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_with(_SIMNET_OPTS)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV output path.")
@click.option("--metrics-out", type=click.Path(dir_okay=False), metavar="PREFIX",
              help="Write per-step metrics to PREFIX.ALGO.nN.csv per run.")
def bench_train_cmd(ranks, algo, epochs, workers, batch, hidden, compute_us,
                    records, backend, reps, seed, latency_us, bandwidth_gbps,
                    pods, out, metrics_out):
    """Per-epoch training time per algorithm, plus scaling efficiency."""
    try:
        spec = BenchSpec(
            scenario="train",
            algorithms=tuple(algo),
            rank_sweep=tuple(ranks),
            backend=backend,
            repetitions=reps,
            seed=seed,
            latency_s=latency_us * 1e-6,
            bandwidth_Bps=bandwidth_gbps * 1e9 / 8,
            pods=pods,
            train_epochs=epochs,
            train_workers=workers,
            train_batch=batch,
            train_hidden=hidden,
            train_records=records,
            compute_per_sample=compute_us * 1e-6,
        )
        rows, metrics = bench_mod.bench_train(spec)
        _emit(rows, out)
        for algo_name, effs in bench_mod.scaling_efficiency(rows).items():
            pretty = ", ".join(f"n={n}: {e:.1%}" for n, e in effs.items())
            click.echo(f"scaling efficiency {algo_name}: {pretty}", err=True)
        if metrics_out:
            for (algo_name, n), text in metrics.items():
                path = f"{metrics_out}.{algo_name}.n{n}.csv"
                with open(path, "w") as f:
                    f.write(text)
                click.echo(f"wrote metrics to {path}", err=True)
    except MinidistError as e:
        _fail(e)


@bench.command("kernels")
@click.option("--size", multiple=True, metavar="SIZE",
              help="Buffer bytes, K/M/G suffixes allowed (repeatable).")
@click.option("--reps", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV output path.")
def bench_kernels_cmd(size, reps, seed, out):
    """Compare the compiled float32 kernels against the numpy fallback."""
    try:
        if size:
            sizes = tuple(max(1, _parse_size(s) // 4) for s in size)
            rows = bench_kernels(sizes, repetitions=reps, seed=seed)
        else:
            rows = bench_kernels(repetitions=reps, seed=seed)
        _emit(rows, out)
    except MinidistError as e:
        _fail(e)


@main.group()
def topo():
    """Inspect communication topologies."""


@topo.command("dump")
@click.option("--ranks", "-n", default=16, show_default=True)
@click.option("--colors", default=4, show_default=True)
@click.option("--arity", default=4, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False),
              help="Write JSON here instead of stdout.")
def topo_dump(ranks, colors, arity, out):
    """Print the multi-color tree set as JSON."""
    try:
        ts = build_multicolor_trees(ranks, colors, arity)
        if out:
            bench_mod.dump_topology(ts, out)
            click.echo(f"wrote {out}")
        else:
            click.echo(tree_set_to_json(ts))
    except MinidistError as e:
        _fail(e)


@main.group()
def dimd():
    """Build, verify, and shuffle dataset store files."""


@dimd.command("build")
@click.option("--records", default=1024, show_default=True)
@click.option("--record-bytes", default=1024, show_default=True)
@click.option("--labels", default=4, show_default=True,
              help="Labels are drawn uniformly from [0, this).")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, metavar="PREFIX",
              help="Writes PREFIX.blob and PREFIX.idx.")
def dimd_build(records, record_bytes, labels, seed, out):
    """Write a synthetic random-bytes blob and its index."""
    rng = np.random.default_rng(seed)
    recs = [
        Record(
            rng.integers(0, 256, size=record_bytes, dtype=np.uint8).tobytes(),
            int(rng.integers(0, labels)),
        )
        for _ in range(records)
    ]
    try:
        blob, index = build_blob(recs)
        with open(f"{out}.blob", "wb") as f:
            f.write(blob)
        with open(f"{out}.idx", "wb") as f:
            f.write(index)
    except MinidistError as e:
        _fail(e)
    click.echo(f"wrote {out}.blob ({len(blob)} bytes) and {out}.idx ({records} records)")


@dimd.command("verify")
@click.argument("prefix")
def dimd_verify(prefix):
    """Check that PREFIX.idx describes PREFIX.blob exactly."""
    try:
        with open(f"{prefix}.idx", "rb") as f:
            entries = parse_index(f.read())
        blob_size = os.path.getsize(f"{prefix}.blob")
        end = max((e.offset + e.length for e in entries), default=0)
        if end > blob_size:
            raise FormatError(
                f"index addresses {end} bytes but blob holds {blob_size}"
            )
        total = sum(e.length for e in entries)
        click.echo(f"ok: {len(entries)} records, {total} payload bytes")
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    except MinidistError as e:
        _fail(e)


@dimd.command("shuffle")
@click.argument("prefix")
@click.option("--ranks", "-n", default=4, show_default=True)
@click.option("--groups", "-g", default=1, show_default=True,
              help="Number of shuffle groups; must divide --ranks.")
@click.option("--segments", "-m", type=int, default=None,
              help="Exchange segments; default sizes them at 1 GiB per rank.")
@click.option("--seed", "-s", default=0, show_default=True)
@click.option("--out", required=True, metavar="PREFIX",
              help="Writes PREFIX.rR.blob and PREFIX.rR.idx per rank.")
def dimd_shuffle(prefix, ranks, groups, segments, seed, out):
    """Shuffle a store across simulated ranks and write the shards."""
    try:
        if groups < 1 or ranks % groups != 0:
            raise FormatError(f"groups={groups} must divide ranks={ranks}")
        group_size = ranks // groups

        def program(ep):
            store = load_partition(
                f"{prefix}.blob", f"{prefix}.idx", ep.rank, ep.n_ranks, group_size
            )
            return shuffle_group(ep, store, m_segments=segments, seed=seed)

        rr = run_ranks(ranks, "sim", program)
        for r, store in enumerate(rr.results):
            blob, index = build_blob(list(store.records()))
            with open(f"{out}.r{r}.blob", "wb") as f:
                f.write(blob)
            with open(f"{out}.r{r}.idx", "wb") as f:
                f.write(index)
            click.echo(f"rank {r}: {store.n_records} records, {store.nbytes} bytes")
    except MinidistError as e:
        _fail(e)
