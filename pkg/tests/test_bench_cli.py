import json
import math

import pytest
from click.testing import CliRunner

from minidist.bench import (
    CSV_HEADER,
    BenchRow,
    BenchSpec,
    bench_allreduce,
    bench_kernels,
    bench_shuffle,
    bench_train,
    bus_bandwidth_GBps,
    dump_topology,
    emit_csv,
    read_csv,
    rows_to_csv,
    scaling_efficiency,
)
from minidist.cli import main as cli_main
from minidist.dimd import parse_index
from minidist.errors import FormatError, InvalidConfig, IoError
from minidist.topology import build_multicolor_trees

GOLDEN_HEADER = "scenario,algorithm,n_ranks,payload_bytes,median_time_s,throughput_GBps,backend"


# -- spec and csv plumbing -------------------------------------------------------


def test_csv_header_is_pinned():
    assert CSV_HEADER == GOLDEN_HEADER


def test_spec_validation():
    with pytest.raises(InvalidConfig):
        BenchSpec(scenario="sort")
    with pytest.raises(InvalidConfig):
        BenchSpec(scenario="allreduce", repetitions=2)
    with pytest.raises(InvalidConfig):
        BenchSpec(scenario="allreduce", rank_sweep=())
    with pytest.raises(InvalidConfig):
        BenchSpec(scenario="allreduce", payload_bytes=(-1,))
    with pytest.raises(InvalidConfig):
        bench_shuffle(BenchSpec(scenario="allreduce"))


def test_spec_builds_a_fresh_network_per_call():
    spec = BenchSpec(scenario="allreduce")
    assert spec.network() is not spec.network()
    assert BenchSpec(scenario="allreduce", backend="threads").network() is None


def test_bus_bandwidth_formula():
    # 2 * payload * (n-1)/n bytes moved per rank in time t
    v = bus_bandwidth_GBps(1 << 20, 4, 0.001)
    assert math.isclose(v, 2 * (1 << 20) * 3 / 4 / 0.001 / 1e9, rel_tol=1e-12)
    assert bus_bandwidth_GBps(0, 4, 0.001) == 0.0
    assert bus_bandwidth_GBps(1024, 1, 0.001) == 0.0
    assert bus_bandwidth_GBps(1024, 4, 0.0) == 0.0


def test_csv_round_trip_is_exact(tmp_path):
    rows = [
        BenchRow("allreduce", "ring", 8, 4096, 1.2345678901234567e-05, 3.3333333333333335, "sim"),
        BenchRow("shuffle", "shuffle-g4", 16, 0, 0.25, 0.0, "threads"),
    ]
    path = tmp_path / "out.csv"
    emit_csv(rows, path)
    text = path.read_text()
    assert text.startswith(GOLDEN_HEADER + "\n")
    assert read_csv(path) == rows
    assert rows_to_csv(rows) == text


def test_csv_read_errors(tmp_path):
    with pytest.raises(IoError):
        read_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,benchmark\n1,2,3\n")
    with pytest.raises(FormatError):
        read_csv(bad)
    short = tmp_path / "short.csv"
    short.write_text(GOLDEN_HEADER + "\nallreduce,ring,8\n")
    with pytest.raises(FormatError):
        read_csv(short)


def test_empty_rows_render_header_only():
    assert rows_to_csv([]) == GOLDEN_HEADER + "\n"


def test_dump_topology(tmp_path):
    path = tmp_path / "topo.json"
    dump_topology(build_multicolor_trees(8, 4, 4), path)
    d = json.loads(path.read_text())
    assert d["n_ranks"] == 8 and len(d["trees"]) == 4


# -- scenarios --------------------------------------------------------------------


def test_allreduce_rows_cover_the_grid():
    spec = BenchSpec(
        scenario="allreduce", rank_sweep=(4, 8), payload_bytes=(0, 1024), repetitions=3
    )
    rows = bench_allreduce(spec)
    assert len(rows) == 3 * 2 * 2  # algorithms x ranks x payloads
    assert all(r.scenario == "allreduce" and r.backend == "sim" for r in rows)
    assert all(r.median_time_s > 0 for r in rows)
    for r in rows:
        if r.payload_bytes == 0:
            assert r.throughput_GBps == 0.0
        else:
            assert r.throughput_GBps > 0


def test_allreduce_skips_configs_that_cannot_build():
    # 4 colors cannot span 2 ranks; that config is dropped, not fatal
    spec = BenchSpec(scenario="allreduce", rank_sweep=(2,), payload_bytes=(1024,))
    rows = bench_allreduce(spec)
    assert {r.algorithm for r in rows} == {"ring", "reduce_bcast"}


def test_allreduce_output_is_reproducible():
    spec = BenchSpec(scenario="allreduce", rank_sweep=(4,), payload_bytes=(4096,))
    assert rows_to_csv(bench_allreduce(spec)) == rows_to_csv(bench_allreduce(spec))


def test_shuffle_memory_tracks_rank_count():
    spec = BenchSpec(
        scenario="shuffle", rank_sweep=(8, 16), groups=(1,),
        corpus_records=1024, record_bytes=512, repetitions=3,
    )
    rows = bench_shuffle(spec)
    mem = {r.n_ranks: r.payload_bytes for r in rows}
    assert mem[8] == 2 * mem[16]  # shards halve when ranks double


def test_shuffle_replication_grows_with_group_count():
    spec = BenchSpec(
        scenario="shuffle", rank_sweep=(8,), groups=(1, 2, 4),
        corpus_records=256, record_bytes=256, repetitions=3,
    )
    rows = bench_shuffle(spec)
    res = {r.algorithm: r.payload_bytes for r in rows}
    # G groups each hold a full copy: resident bytes scale with G
    assert res["shuffle-g2"] == 2 * res["shuffle-g1"]
    assert res["shuffle-g4"] == 4 * res["shuffle-g1"]


def test_shuffle_skips_indivisible_group_counts(caplog):
    spec = BenchSpec(
        scenario="shuffle", rank_sweep=(8,), groups=(3,),
        corpus_records=64, record_bytes=64, repetitions=3,
    )
    assert bench_shuffle(spec) == []


def test_train_single_node_times_are_algorithm_independent():
    spec = BenchSpec(
        scenario="train", rank_sweep=(1,), train_epochs=2,
        train_records=128, train_hidden=16, repetitions=3,
    )
    rows, metrics = bench_train(spec)
    times = {r.algorithm: r.median_time_s for r in rows}
    assert len(set(times.values())) == 1
    assert set(metrics) == {(a, 1) for a in spec.algorithms}
    for text in metrics.values():
        assert text.startswith("epoch,step,loss,acc,lr,elapsed_s\n")


def test_scaling_efficiency_reference_is_one():
    spec = BenchSpec(
        scenario="train", rank_sweep=(1, 2), algorithms=("ring",),
        train_epochs=2, train_records=128, train_hidden=16, repetitions=3,
    )
    rows, _ = bench_train(spec)
    eff = scaling_efficiency(rows)
    assert eff["ring"][1] == 1.0
    assert 0 < eff["ring"][2] <= 1.5


def test_kernel_bench_times_every_implementation():
    rows = bench_kernels(sizes=(1 << 12,), repetitions=3)
    names = {r.algorithm for r in rows}
    assert any(n.startswith("numpy:") for n in names)
    assert all(r.median_time_s > 0 and r.backend == "local" for r in rows)
    with pytest.raises(InvalidConfig):
        bench_kernels(sizes=(1 << 12,), repetitions=2)


# -- command line ------------------------------------------------------------------


def run_cli(*args):
    return CliRunner().invoke(cli_main, args, catch_exceptions=False)


def test_cli_help_lists_groups():
    res = run_cli("--help")
    assert res.exit_code == 0
    for word in ("bench", "topo", "dimd"):
        assert word in res.output


def test_cli_bench_allreduce_writes_csv(tmp_path):
    out = tmp_path / "ar.csv"
    res = run_cli(
        "bench", "allreduce", "-n", "4", "--payload", "4K", "--reps", "3",
        "--out", str(out),
    )
    assert res.exit_code == 0, res.output
    rows = read_csv(out)
    assert {r.algorithm for r in rows} == {"multicolor", "ring", "reduce_bcast"}
    assert all(r.payload_bytes == 4096 for r in rows)


def test_cli_bench_prints_to_stdout_without_out_flag():
    res = run_cli("bench", "kernels", "--size", "4K", "--reps", "3")
    assert res.exit_code == 0
    assert res.output.startswith(GOLDEN_HEADER)


def test_cli_payload_suffix_parsing():
    res = run_cli("bench", "allreduce", "--payload", "3Q")
    assert res.exit_code == 2
    res = run_cli("bench", "allreduce", "--payload", "-4")
    assert res.exit_code == 2


def test_cli_topo_dump(tmp_path):
    out = tmp_path / "topo.json"
    res = run_cli("topo", "dump", "--ranks", "8", "--colors", "4", "--out", str(out))
    assert res.exit_code == 0
    assert json.loads(out.read_text())["k"] == 4
    # impossible topology is a domain error, not a crash
    res = run_cli("topo", "dump", "--ranks", "3", "--colors", "4")
    assert res.exit_code == 1
    assert "error:" in res.output


def test_cli_dimd_round_trip(tmp_path):
    prefix = str(tmp_path / "corpus")
    res = run_cli(
        "dimd", "build", "--records", "64", "--record-bytes", "128",
        "--labels", "4", "--seed", "7", "--out", prefix,
    )
    assert res.exit_code == 0, res.output

    res = run_cli("dimd", "verify", prefix)
    assert res.exit_code == 0
    assert "ok: 64 records" in res.output

    shuf = str(tmp_path / "shuf")
    res = run_cli(
        "dimd", "shuffle", prefix, "--ranks", "4", "-g", "2", "-m", "2",
        "-s", "1", "--out", shuf,
    )
    assert res.exit_code == 0, res.output
    total = 0
    for r in range(4):
        blob = (tmp_path / f"shuf.r{r}.blob").read_bytes()
        idx = parse_index((tmp_path / f"shuf.r{r}.idx").read_bytes())
        total += len(idx)
        assert all(e.offset + e.length <= len(blob) for e in idx)
    assert total == 2 * 64  # two groups, each holding the full corpus


def test_cli_dimd_error_exit_codes(tmp_path):
    res = run_cli("dimd", "verify", str(tmp_path / "nope"))
    assert res.exit_code == 1
    prefix = str(tmp_path / "c")
    run_cli("dimd", "build", "--records", "8", "--record-bytes", "16", "--out", prefix)
    res = run_cli("dimd", "shuffle", prefix, "--ranks", "4", "-g", "3", "--out", str(tmp_path / "x"))
    assert res.exit_code == 1


def test_cli_train_metrics_files(tmp_path):
    out = tmp_path / "tr.csv"
    prefix = tmp_path / "metrics"
    res = run_cli(
        "bench", "train", "-n", "1", "--algo", "ring", "--epochs", "2",
        "--records", "64", "--hidden", "8", "--reps", "3",
        "--out", str(out), "--metrics-out", str(prefix),
    )
    assert res.exit_code == 0, res.output
    f = tmp_path / "metrics.ring.n1.csv"
    assert f.exists()
    assert f.read_text().startswith("epoch,step,loss,acc,lr,elapsed_s\n")
    assert "scaling efficiency ring" in res.output
