import numpy as np

from minidist.collectives import (
    GradientBuffer,
    VarPayload,
    allreduce_multicolor,
    allreduce_ring,
    alltoallv,
    reduce_then_broadcast,
)
from minidist.topology import build_multicolor_trees, build_ring
from minidist.transport import run_ranks


def oracle_tree(ts, arrays):
    ts = ts.with_plan(len(arrays[0]))
    out = np.empty_like(arrays[0])
    for chunk in ts.plan.chunks:
        tree = ts.trees[chunk.color]
        lo, hi = chunk.start, chunk.start + chunk.length

        def fold(node):
            acc = arrays[node][lo:hi].copy()
            for ch in tree.children[node]:
                acc += fold(ch)
            return acc

        out[lo:hi] = fold(tree.root)
    return out


def oracle_ring(order, arrays):
    acc = arrays[order[-1]].copy()
    for pos in range(len(order) - 2, -1, -1):
        nxt = arrays[order[pos]].copy()
        nxt += acc
        acc = nxt
    return acc


def oracle_rb(arrays):
    acc = arrays[0].copy()
    for a in arrays[1:]:
        acc += a
    return acc


# trivial: N=2 k=1 [1,2]+[10,20] = [11,22]
ts2 = build_multicolor_trees(2, k=1, arity=4)
res = run_ranks(
    2,
    "sim",
    lambda ep: allreduce_multicolor(
        ep,
        GradientBuffer.of([1, 2] if ep.rank == 0 else [10, 20]),
        ts2,
    ).data.tolist(),
).results
print("mc N=2:", res)
assert res == [[11.0, 22.0], [11.0, 22.0]]

# N=8 k=4 constant [r] -> [28]
ts8 = build_multicolor_trees(8, k=4, arity=4)
res = run_ranks(
    8,
    "sim",
    lambda ep: allreduce_multicolor(
        ep, GradientBuffer.of(np.full(10, ep.rank, np.float32)), ts8
    ).data,
).results
print("mc N=8 const:", res[0][:3], all((r == 28).all() for r in res))
assert all((r == 28).all() for r in res)

# order-matched bitwise oracle, len=1000, random, odd length 997 too, all backends
rng = np.random.default_rng(7)
for n, L in [(8, 1000), (8, 997), (4, 7), (3, 1), (2, 0), (16, 250)]:
    arrays = [rng.standard_normal(L).astype(np.float32) for _ in range(n)]
    k = min(4, n)
    ts = build_multicolor_trees(n, k=k, arity=4)
    want = oracle_tree(ts, arrays)
    for backend in ("sim", "threads"):
        res = run_ranks(
            n,
            backend,
            lambda ep: allreduce_multicolor(
                ep, GradientBuffer(arrays[ep.rank].copy()), ts, segment_elems=64
            ).data,
        ).results
        for r in res:
            assert (r == want).all(), (n, L, backend)
    print(f"mc bitwise n={n} L={L}: ok")

# ring N=3 -> [6]
res = run_ranks(
    3,
    "sim",
    lambda ep: allreduce_ring(ep, GradientBuffer.of([ep.rank + 1.0])).data.tolist(),
).results
print("ring N=3:", res)
assert res == [[6.0]] * 3

# ring bitwise oracle
for n, L in [(8, 1000), (5, 333), (2, 4)]:
    arrays = [rng.standard_normal(L).astype(np.float32) for _ in range(n)]
    ring = build_ring(n)
    want = oracle_ring(ring.order, arrays)
    for backend in ("sim", "threads"):
        res = run_ranks(
            n,
            backend,
            lambda ep: allreduce_ring(
                ep, GradientBuffer(arrays[ep.rank].copy()), ring, segment_elems=100
            ).data,
        ).results
        for r in res:
            assert (r == want).all(), (n, L, backend)
    print(f"ring bitwise n={n} L={L}: ok")

# rb: one-hot N=4 -> ones; bitwise oracle; rb(N=2) == ring(N=2)
res = run_ranks(
    4,
    "sim",
    lambda ep: reduce_then_broadcast(
        ep, GradientBuffer(np.eye(4, dtype=np.float32)[ep.rank].copy())
    ).data,
).results
assert all((r == 1).all() for r in res)
print("rb one-hot: ok")

arrays = [rng.standard_normal(513).astype(np.float32) for _ in range(8)]
want = oracle_rb(arrays)
for backend in ("sim", "threads"):
    res = run_ranks(
        8,
        backend,
        lambda ep: reduce_then_broadcast(ep, GradientBuffer(arrays[ep.rank].copy())).data,
    ).results
    for r in res:
        assert (r == want).all()
print("rb bitwise: ok")

arrays2 = [rng.standard_normal(64).astype(np.float32) for _ in range(2)]
r_ring = run_ranks(
    2, "sim", lambda ep: allreduce_ring(ep, GradientBuffer(arrays2[ep.rank].copy())).data
).results
r_rb = run_ranks(
    2,
    "sim",
    lambda ep: reduce_then_broadcast(ep, GradientBuffer(arrays2[ep.rank].copy())).data,
).results
assert (r_ring[0] == r_rb[0]).all()
print("rb == ring at N=2: ok")

# N=1 identity for all three
one = run_ranks(
    1, "sim", lambda ep: allreduce_ring(ep, GradientBuffer.of([3.5, 4.5])).data.tolist()
).results
assert one == [[3.5, 4.5]]
print("N=1 identity: ok")

# alltoallv swap
def swap_prog(ep):
    if ep.rank == 0:
        send = VarPayload.from_slices([b"", b"ab"])
    else:
        send = VarPayload.from_slices([b"xyz", b""])
    out = alltoallv(ep, send)
    return bytes(out.slice_for(1 - ep.rank))


res = run_ranks(2, "sim", swap_prog).results
print("a2a swap:", res)
assert res == [b"xyz", b"ab"]

# all empty
res = run_ranks(
    4, "sim", lambda ep: alltoallv(ep, VarPayload.from_slices([b""] * 4)).data
).results
assert res == [b""] * 4
print("a2a empty: ok")

# permutation oracle, N=4 random, threads too
mats = [[rng.bytes(int(rng.integers(0, 2000))) for _ in range(4)] for _ in range(4)]
want_rows = [b"".join(mats[src][dst] for src in range(4)) for dst in range(4)]
for backend in ("sim", "threads"):
    res = run_ranks(
        4,
        backend,
        lambda ep: alltoallv(ep, VarPayload.from_slices(mats[ep.rank])).data,
    ).results
    assert res == want_rows, backend
print("a2a permutation oracle: ok")

# LengthMismatch on disagreeing lengths
from minidist.errors import LengthMismatch

try:
    run_ranks(
        2,
        "sim",
        lambda ep: allreduce_ring(ep, GradientBuffer.zeros(4 if ep.rank else 5)),
    )
    print("FAIL: no LengthMismatch")
except LengthMismatch as e:
    print("LengthMismatch: ok,", e)

print("ALL COLLECTIVE SMOKE OK")
