"""minidist: a desk-scale distributed-training communication stack.

Multi-color tree allreduce, pipelined ring allreduce, AllToAllV
shuffle, an in-memory sharded dataset store, and a synchronous
data-parallel SGD harness — all running over pluggable transports
(deterministic simulated fat-tree, in-process threads, TCP).
"""

from minidist import errors
from minidist.collectives import (
    GradientBuffer,
    VarPayload,
    allreduce,
    alltoallv,
)
from minidist.dimd import (
    BatchRequest,
    IndexEntry,
    Record,
    ShardStore,
    build_blob,
    load_partition,
    parse_index,
    random_batch,
    shard_from_bytes,
    shuffle_all,
    shuffle_group,
)
from minidist.sgd import (
    LrSchedule,
    ToyModel,
    TrainConfig,
    TrainResult,
    grad,
    lr_at,
    make_synthetic_corpus,
    run_training,
    train_step,
)
from minidist.topology import (
    ChunkPlan,
    ColorTree,
    ColorTreeSet,
    RingOrder,
    ValidationReport,
    build_multicolor_trees,
    build_ring,
    make_chunk_plan,
    tree_set_to_json,
    validate_tree_set,
)
from minidist.transport import RunResult, SimNetwork, SubCommunicator, run_ranks

__version__ = "0.1.0"

__all__ = [
    "BatchRequest",
    "ChunkPlan",
    "ColorTree",
    "ColorTreeSet",
    "GradientBuffer",
    "IndexEntry",
    "LrSchedule",
    "Record",
    "RingOrder",
    "RunResult",
    "ShardStore",
    "SimNetwork",
    "SubCommunicator",
    "ToyModel",
    "TrainConfig",
    "TrainResult",
    "ValidationReport",
    "VarPayload",
    "allreduce",
    "alltoallv",
    "build_blob",
    "build_multicolor_trees",
    "build_ring",
    "errors",
    "grad",
    "load_partition",
    "lr_at",
    "make_chunk_plan",
    "make_synthetic_corpus",
    "parse_index",
    "random_batch",
    "run_ranks",
    "run_training",
    "shard_from_bytes",
    "shuffle_all",
    "shuffle_group",
    "tree_set_to_json",
    "train_step",
    "validate_tree_set",
]
