"""Communication structures: multi-color k-ary trees, rings, chunk plans.

The multi-color allreduce splits the payload into k chunks and reduces
each chunk along its own spanning tree. Trees are laid out so the
interior (summing) nodes are disjoint across colors: every rank does
interior work for at most one color, which is what lets the k
reductions run concurrently without synchronizing on shared hosts.

Construction for color c relabels rank r at BFS position p as
``(p + c * ceil(n/k)) % n`` and wires a k-ary heap layout over the
positions, so the interior block of each color lands on a different
stretch of ranks.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

from minidist.errors import DisjointnessViolation, InvalidConfig

RankId = int

DEFAULT_COLORS = 4
DEFAULT_ARITY = 4


class Chunk(NamedTuple):
    color: int
    start: int
    length: int


@dataclass(frozen=True)
class ChunkPlan:
    """Contiguous split of a payload into one chunk per color."""

    payload_len: int
    chunks: tuple[Chunk, ...]


@dataclass(frozen=True)
class ColorTree:
    """One color's spanning tree over all ranks."""

    color: int
    root: RankId
    parent: dict[RankId, RankId | None]
    children: dict[RankId, tuple[RankId, ...]]
    interior: frozenset[RankId]


@dataclass(frozen=True)
class ColorTreeSet:
    """The k trees plus the chunk plan for the payload they carry.

    Trees are payload-independent, so construction attaches an empty
    plan; ``with_plan`` produces the set for a concrete payload length.
    """

    k: int
    arity: int
    n_ranks: int
    trees: tuple[ColorTree, ...]
    plan: ChunkPlan

    def with_plan(self, payload_len: int) -> ColorTreeSet:
        return dataclasses.replace(self, plan=make_chunk_plan(payload_len, self.k))


@dataclass(frozen=True)
class RingOrder:
    """Rank visit order for the ring allreduce; order[0] is the root."""

    order: tuple[RankId, ...]

    @property
    def root(self) -> RankId:
        return self.order[0]


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def make_chunk_plan(payload_len: int, k: int) -> ChunkPlan:
    """Split ``payload_len`` elements into k contiguous chunks.

    The first ``payload_len % k`` chunks get ``ceil(payload_len / k)``
    elements, the rest get the floor; chunks may be empty.
    """
    if payload_len < 0:
        raise InvalidConfig(f"negative payload length {payload_len}")
    if k < 1:
        raise InvalidConfig(f"chunk count must be >= 1, got {k}")
    base, extra = divmod(payload_len, k)
    chunks = []
    start = 0
    for color in range(k):
        length = base + 1 if color < extra else base
        chunks.append(Chunk(color, start, length))
        start += length
    return ChunkPlan(payload_len, tuple(chunks))


def build_ring(n_ranks: int, root: RankId = 0) -> RingOrder:
    """Ring visit order root, root+1, ... (mod n_ranks)."""
    if n_ranks < 1:
        raise InvalidConfig(f"need at least 1 rank, got {n_ranks}")
    if not 0 <= root < n_ranks:
        raise InvalidConfig(f"root {root} out of range for {n_ranks} ranks")
    return RingOrder(tuple((root + i) % n_ranks for i in range(n_ranks)))


def build_multicolor_trees(
    n_ranks: int, k: int = DEFAULT_COLORS, arity: int = DEFAULT_ARITY
) -> ColorTreeSet:
    """Build k spanning trees with pairwise-disjoint interior node sets.

    Raises InvalidConfig for impossible parameters and
    DisjointnessViolation when the layout cannot keep the interior
    blocks of different colors from overlapping (too few ranks for the
    requested k and arity).
    """
    if n_ranks < 2:
        raise InvalidConfig(f"need at least 2 ranks, got {n_ranks}")
    if k < 1:
        raise InvalidConfig(f"color count must be >= 1, got {k}")
    if k > n_ranks:
        raise InvalidConfig(f"{k} colors need at least {k} ranks, got {n_ranks}")
    if arity < 1:
        raise InvalidConfig(f"arity must be >= 1, got {arity}")

    shift = math.ceil(n_ranks / k)
    trees = []
    for color in range(k):
        seq = [(p + color * shift) % n_ranks for p in range(n_ranks)]
        parent: dict[RankId, RankId | None] = {seq[0]: None}
        kids: dict[RankId, list[RankId]] = {r: [] for r in seq}
        for p in range(1, n_ranks):
            par = seq[(p - 1) // arity]
            parent[seq[p]] = par
            kids[par].append(seq[p])
        children = {r: tuple(c) for r, c in kids.items()}
        interior = frozenset(r for r in seq if children[r]) | {seq[0]}
        trees.append(ColorTree(color, seq[0], parent, children, interior))

    tree_set = ColorTreeSet(k, arity, n_ranks, tuple(trees), make_chunk_plan(0, k))
    report = validate_tree_set(tree_set)
    disjoint = [v for v in report.violations if v.kind == "DisjointnessViolation"]
    if disjoint:
        raise DisjointnessViolation(disjoint[0].detail)
    if report.violations:
        # anything else here is a builder bug, not a caller error
        raise AssertionError(f"builder produced an invalid tree set: {report.violations}")
    return tree_set


def validate_tree_set(ts: ColorTreeSet) -> ValidationReport:
    """Check every structural invariant; reports, never raises.

    Covers per-tree span, acyclicity, parent/children consistency, the
    arity bound, cross-color interior disjointness, and contiguous
    chunk coverage of the payload described by ts.plan.
    """
    bad: list[Violation] = []
    all_ranks = set(range(ts.n_ranks))

    for tree in ts.trees:
        tag = f"color {tree.color}"
        if set(tree.parent) != all_ranks:
            bad.append(Violation("SpanViolation", f"{tag}: parent map does not cover all ranks"))
            continue
        roots = [r for r, p in tree.parent.items() if p is None]
        if set(roots) != {tree.root}:
            bad.append(Violation("SpanViolation", f"{tag}: root field disagrees with parent map"))
        for r, p in tree.parent.items():
            if p is not None and r not in tree.children.get(p, ()):
                bad.append(
                    Violation("StructureViolation", f"{tag}: {r} missing from children of {p}")
                )
        for r, cs in tree.children.items():
            if len(cs) > ts.arity:
                bad.append(
                    Violation(
                        "ArityViolation", f"{tag}: rank {r} has {len(cs)} > {ts.arity} children"
                    )
                )
            for c in cs:
                if tree.parent.get(c) != r:
                    bad.append(
                        Violation("StructureViolation", f"{tag}: child {c} of {r} disagrees")
                    )
        # acyclicity: every rank must reach the root in <= n steps
        for r in range(ts.n_ranks):
            cur: RankId | None = r
            steps = 0
            while cur is not None and steps <= ts.n_ranks:
                cur = tree.parent.get(cur)
                steps += 1
            if cur is not None:
                bad.append(Violation("AcyclicityViolation", f"{tag}: cycle reachable from {r}"))
                break
        derived = {r for r, cs in tree.children.items() if cs} | {tree.root}
        if derived != set(tree.interior):
            bad.append(
                Violation("StructureViolation", f"{tag}: interior set disagrees with children map")
            )

    for i in range(len(ts.trees)):
        if ts.trees[i].color != i:
            bad.append(Violation("StructureViolation", f"trees[{i}] has color {ts.trees[i].color}"))
        for j in range(i + 1, len(ts.trees)):
            shared = ts.trees[i].interior & ts.trees[j].interior
            if shared:
                bad.append(
                    Violation(
                        "DisjointnessViolation",
                        f"colors {i} and {j} share interior ranks {sorted(shared)}",
                    )
                )

    if len(ts.plan.chunks) != ts.k:
        bad.append(Violation("ChunkCoverageViolation", "chunk count != color count"))
    else:
        pos = 0
        for c, chunk in enumerate(ts.plan.chunks):
            if chunk.color != c or chunk.start != pos or chunk.length < 0:
                bad.append(
                    Violation("ChunkCoverageViolation", f"chunk {c} is not contiguous in order")
                )
                break
            pos += chunk.length
        else:
            if pos != ts.plan.payload_len:
                bad.append(Violation("ChunkCoverageViolation", "chunks do not cover the payload"))

    return ValidationReport(tuple(bad))


def tree_set_to_dict(ts: ColorTreeSet) -> dict:
    """JSON-friendly form of a tree set, stable field order."""
    return {
        "k": ts.k,
        "arity": ts.arity,
        "n_ranks": ts.n_ranks,
        "trees": [
            {
                "color": t.color,
                "root": t.root,
                "parent": {str(r): t.parent[r] for r in sorted(t.parent)},
                "children": {str(r): list(t.children[r]) for r in sorted(t.children)},
                "interior": sorted(t.interior),
            }
            for t in ts.trees
        ],
        "plan": {
            "payload_len": ts.plan.payload_len,
            "chunks": [
                {"color": c.color, "start": c.start, "len": c.length} for c in ts.plan.chunks
            ],
        },
    }


def tree_set_to_json(ts: ColorTreeSet) -> str:
    return json.dumps(tree_set_to_dict(ts), indent=2)
