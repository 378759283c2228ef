"""Synchronous data-parallel SGD on a toy MLP.

One rank models a node that owns several worker contexts. Each step,
every worker computes the summed gradient of its own sub-batch, the
node folds those sums in worker order, the nodes allreduce the folded
buffers, and every rank applies the identical update W -= lr * (g / B)
with B the effective batch. Because the fold orders are fixed and the
allreduce is bitwise deterministic, all replicas stay bitwise equal,
and a serial run that replays the same fold order reproduces the
distributed weights exactly.

Workers draw their samples directly from the node's shard with a
per-worker counter-based seed, so a sub-batch never passes through
another worker, and any layout of the same worker count consumes the
same global sample multiset per step.

Forward and backward math run in float64 from the float32 weights; the
gradient is rounded to float32 once per worker sub-batch, right before
the folds.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, replace

import numpy as np

from minidist import _kernels
from minidist.collectives import GradientBuffer, allreduce
from minidist.dimd import (
    BatchRequest,
    Record,
    ShardStore,
    _mix64,
    build_blob,
    parse_index,
    random_batch,
    shard_from_bytes,
    shuffle_all,
)
from minidist.errors import DisjointnessViolation, DivergenceDetected, InvalidConfig
from minidist.topology import build_multicolor_trees, build_ring
from minidist.transport.runner import run_ranks

_SAMPLE_ROLE = int.from_bytes(b"samp", "little")
_SHUFFLE_ROLE = int.from_bytes(b"shuf", "little")

# direction bits 0..2 belong to the collectives; 3 is free for control
_HASH_TAG = 3 << 28
_VERDICT_TAG = (3 << 28) | 1


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Job shape plus schedule and plumbing knobs.

    n_nodes ranks, workers_per_node worker contexts each, and
    per_worker_batch samples per worker per step give an effective
    batch of n_nodes * workers_per_node * per_worker_batch.
    """

    n_nodes: int
    workers_per_node: int
    per_worker_batch: int
    epochs: int
    base_lr: float = 0.1
    warmup_epochs: int = 5
    drop_every: int = 30
    drop_factor: float = 10.0
    seed: int = 0
    group_size: int = 1
    shuffle_every: int = 1  # epochs between shuffles, 0 = never
    sim_compute_per_sample: float = 0.0  # virtual seconds, simnet only
    hidden: int = 8

    def __post_init__(self):
        for name in ("n_nodes", "workers_per_node", "per_worker_batch", "epochs"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.base_lr <= 0:
            raise InvalidConfig(f"base_lr must be > 0, got {self.base_lr}")
        if self.warmup_epochs < 0:
            raise InvalidConfig(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.drop_every < 1:
            raise InvalidConfig(f"drop_every must be >= 1, got {self.drop_every}")
        if self.drop_factor <= 1:
            raise InvalidConfig(f"drop_factor must be > 1, got {self.drop_factor}")
        if self.group_size < 1:
            raise InvalidConfig(f"group_size must be >= 1, got {self.group_size}")
        if self.shuffle_every < 0:
            raise InvalidConfig(f"shuffle_every must be >= 0, got {self.shuffle_every}")
        if self.sim_compute_per_sample < 0:
            raise InvalidConfig("sim_compute_per_sample must be >= 0")
        if self.hidden < 1:
            raise InvalidConfig(f"hidden must be >= 1, got {self.hidden}")

    @property
    def effective_batch(self) -> int:
        return self.n_nodes * self.workers_per_node * self.per_worker_batch


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    k: int  # per-worker batch
    n: int  # total workers
    warmup_epochs: int
    drop_every: int
    drop_factor: float


def lr_schedule(cfg: TrainConfig) -> LrSchedule:
    return LrSchedule(
        base_lr=cfg.base_lr,
        k=cfg.per_worker_batch,
        n=cfg.n_nodes * cfg.workers_per_node,
        warmup_epochs=cfg.warmup_epochs,
        drop_every=cfg.drop_every,
        drop_factor=cfg.drop_factor,
    )


def lr_at(sched: LrSchedule, epoch: float) -> float:
    """Warm-start schedule: linear ramp to base_lr*k*n/256, then step decays.

    The ramp starts at base_lr, reaches the target exactly at
    warmup_epochs (continuous there), and afterwards the rate drops by
    drop_factor at every drop_every-epoch boundary.
    """
    if epoch < 0:
        raise InvalidConfig(f"epoch must be >= 0, got {epoch}")
    target = sched.base_lr * sched.k * sched.n / 256.0
    if epoch < sched.warmup_epochs:
        return sched.base_lr + (target - sched.base_lr) * (epoch / sched.warmup_epochs)
    drops = int((epoch - sched.warmup_epochs) // sched.drop_every)
    return target * sched.drop_factor ** (-drops)


# -- model ---------------------------------------------------------------------


@dataclass
class ToyModel:
    """One-hidden-layer tanh MLP with softmax cross-entropy loss.

    Weights live in one flat float32 vector laid out [W1 | b1 | W2 | b2]
    so the whole model is a single allreduce payload.
    """

    weights: np.ndarray
    n_in: int = 16
    hidden: int = 8
    n_classes: int = 4

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.dtype != np.float32 or w.ndim != 1:
            raise InvalidConfig("weights must be a flat float32 vector")
        if w.shape[0] != self.n_params:
            raise InvalidConfig(
                f"expected {self.n_params} weights for "
                f"{self.n_in}->{self.hidden}->{self.n_classes}, got {w.shape[0]}"
            )
        if not w.flags.c_contiguous:
            w = np.ascontiguousarray(w)
        self.weights = w

    @property
    def n_params(self) -> int:
        return (
            self.n_in * self.hidden
            + self.hidden
            + self.hidden * self.n_classes
            + self.n_classes
        )

    @classmethod
    def create(
        cls, n_in: int = 16, hidden: int = 8, n_classes: int = 4, seed: int = 0
    ) -> ToyModel:
        n = n_in * hidden + hidden + hidden * n_classes + n_classes
        rng = np.random.default_rng(seed)
        w = (rng.standard_normal(n) * 0.1).astype(np.float32)
        return cls(w, n_in=n_in, hidden=hidden, n_classes=n_classes)

    def _layers(self):
        w = self.weights.astype(np.float64)
        i = self.n_in * self.hidden
        w1 = w[:i].reshape(self.n_in, self.hidden)
        b1 = w[i : i + self.hidden]
        j = i + self.hidden
        w2 = w[j : j + self.hidden * self.n_classes].reshape(self.hidden, self.n_classes)
        b2 = w[j + self.hidden * self.n_classes :]
        return w1, b1, w2, b2

    def _forward(self, x: np.ndarray):
        w1, b1, w2, b2 = self._layers()
        h = np.tanh(x @ w1 + b1)
        z = h @ w2 + b2
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        p = ez / ez.sum(axis=1, keepdims=True)
        return h, z, p

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class index per row of x."""
        _, z, _ = self._forward(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return z.argmax(axis=1)

    def loss_sum(self, x: np.ndarray, y: np.ndarray) -> float:
        _, _, p = self._forward(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        rows = np.arange(p.shape[0])
        return float(-np.log(p[rows, np.asarray(y)]).sum())

    def loss_and_grad_sum(
        self, x: np.ndarray, y: np.ndarray
    ) -> tuple[np.ndarray, float, int]:
        """Summed (not averaged) gradient over the batch.

        Returns (gradient sum as float32, loss sum, correct count). All
        internal math is float64; the one float32 rounding happens on
        the final summed gradient.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64)
        if x.shape[1] != self.n_in:
            raise InvalidConfig(f"expected {self.n_in} features, got {x.shape[1]}")
        h, z, p = self._forward(x)
        rows = np.arange(x.shape[0])
        loss = float(-np.log(p[rows, y]).sum())
        correct = int((z.argmax(axis=1) == y).sum())

        dz = p.copy()
        dz[rows, y] -= 1.0
        dw2 = h.T @ dz
        db2 = dz.sum(axis=0)
        dh = dz @ self._layers()[2].T
        da = (1.0 - h * h) * dh
        dw1 = x.T @ da
        db1 = da.sum(axis=0)
        g = np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2]).astype(np.float32)
        return g, loss, correct


def grad(model: ToyModel, batch) -> GradientBuffer:
    """Mean gradient of the loss over a list of (features, label) pairs."""
    if not batch:
        raise InvalidConfig("batch must be non-empty")
    x = np.stack([np.asarray(f, dtype=np.float64) for f, _ in batch])
    y = np.array([lbl for _, lbl in batch], dtype=np.int64)
    gsum, _, _ = model.loss_and_grad_sum(x, y)
    return GradientBuffer(gsum / np.float32(len(batch)))


# -- corpus and sampling -------------------------------------------------------


def make_synthetic_corpus(
    n_records: int,
    n_in: int = 16,
    n_classes: int = 4,
    seed: int = 0,
    margin: float = 4.0,
    noise: float = 1.0,
) -> list[Record]:
    """Linearly separable gaussian blobs, one mean per class.

    Features are stored little-endian float32, the class index is the
    record label, so a record is exactly what the dataset store ships.
    """
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, n_in))
    means *= margin / np.linalg.norm(means, axis=1, keepdims=True)
    ys = rng.integers(0, n_classes, size=n_records)
    xs = means[ys] + noise * rng.standard_normal((n_records, n_in))
    return [
        Record(xs[i].astype("<f4").tobytes(), int(ys[i])) for i in range(n_records)
    ]


def decode_record(rec: Record) -> tuple[np.ndarray, int]:
    return np.frombuffer(rec.bytes, dtype="<f4").astype(np.float64), rec.label


def sample_node_batch(
    store: ShardStore, cfg: TrainConfig, rank: int, step: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-worker sub-batches for one step, carved at the source.

    Worker j of rank r is global worker r*m+j and draws its own
    per_worker_batch samples with a seed keyed on that global index, so
    the same worker count yields the same sample multiset no matter how
    workers are grouped into nodes.
    """
    out = []
    for j in range(cfg.workers_per_node):
        worker = rank * cfg.workers_per_node + j
        recs = random_batch(
            store,
            BatchRequest(
                cfg.per_worker_batch, _mix64(cfg.seed, _SAMPLE_ROLE, worker, step)
            ),
        )
        x = np.stack([np.frombuffer(r.bytes, dtype="<f4") for r in recs]).astype(
            np.float64
        )
        y = np.array([r.label for r in recs], dtype=np.int64)
        out.append((x, y))
    return out


# -- distributed step ----------------------------------------------------------


@dataclass(frozen=True)
class StepStats:
    step: int
    epoch: float
    lr: float
    loss: float  # mean loss over the effective batch
    correct: int
    samples: int
    elapsed_s: float = 0.0

    @property
    def acc(self) -> float:
        return self.correct / self.samples


def node_gradient(model: ToyModel, worker_batches) -> np.ndarray:
    """Fold worker gradient sums in worker order.

    The buffer carries two extra float32 tail slots, loss sum and
    correct count, so metrics ride the same allreduce as the gradient.
    """
    p = model.n_params
    acc = None
    for x, y in worker_batches:
        g, loss, correct = model.loss_and_grad_sum(x, y)
        buf = np.empty(p + 2, dtype=np.float32)
        buf[:p] = g
        buf[p] = loss
        buf[p + 1] = correct
        if acc is None:
            acc = buf
        else:
            _kernels.add_f32(acc, buf)
    return acc


def check_replicas(ep, weights: np.ndarray, step: int) -> None:
    """Star-compare an 8-byte weight hash; raise if any replica differs.

    Doubles as a per-step barrier. Every rank raises, not just the one
    that drifted, so a failed job stops as a whole.
    """
    if ep.n_ranks == 1:
        return
    digest = hashlib.blake2b(memoryview(weights).cast("B"), digest_size=8).digest()
    if ep.rank == 0:
        seen = [digest] + [ep.recv(r, _HASH_TAG) for r in range(1, ep.n_ranks)]
        ok = all(d == digest for d in seen)
        verdict = b"\x01" if ok else b"\x00"
        for r in range(1, ep.n_ranks):
            ep.send(r, _VERDICT_TAG, verdict)
        if not ok:
            raise DivergenceDetected(
                f"step {step}: replica weight hashes differ: "
                + ", ".join(d.hex() for d in seen)
            )
    else:
        ep.send(0, _HASH_TAG, digest)
        if ep.recv(0, _VERDICT_TAG) == b"\x00":
            raise DivergenceDetected(f"step {step}: replica weight hashes differ")


def train_step(
    ep,
    model: ToyModel,
    cfg: TrainConfig,
    store: ShardStore,
    algo: str = "multicolor",
    *,
    step: int = 0,
    epoch: float = 0.0,
    tree_set=None,
    ring=None,
) -> tuple[ToyModel, StepStats]:
    """One synchronous step: sample, fold, allreduce, identical update.

    Every rank must enter with bitwise-identical weights; the final
    hash check certifies they leave that way too.
    """
    if ep.n_ranks != cfg.n_nodes:
        raise InvalidConfig(f"config says {cfg.n_nodes} nodes, running {ep.n_ranks}")
    lr = lr_at(lr_schedule(cfg), epoch)
    batches = sample_node_batch(store, cfg, ep.rank, step)
    if cfg.sim_compute_per_sample > 0.0:
        compute = getattr(ep, "compute", None)
        if compute is not None:
            compute(
                cfg.sim_compute_per_sample
                * cfg.workers_per_node
                * cfg.per_worker_batch
            )
    local = node_gradient(model, batches)
    summed = allreduce(ep, GradientBuffer(local), algo, tree_set=tree_set, ring=ring)
    g = summed.data
    p = model.n_params
    b = cfg.effective_batch
    _kernels.sub_scaled_f32(model.weights, g[:p], lr / b)
    check_replicas(ep, model.weights, step)
    stats = StepStats(
        step=step,
        epoch=epoch,
        lr=lr,
        loss=float(g[p]) / b,
        correct=int(g[p + 1]),
        samples=b,
    )
    return model, stats


# -- training loop -------------------------------------------------------------


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss: float
    acc: float
    time_s: float  # virtual on the simnet, wall elsewhere


@dataclass(frozen=True)
class TrainResult:
    history: list[EpochMetrics]
    steps: list[StepStats]
    weights: np.ndarray
    virtual_time: float
    wall_time: float

    @property
    def final_acc(self) -> float:
        return self.history[-1].acc


def comm_plan(n_ranks: int, algo: str):
    """Pick the widest color count the rank count supports."""
    tree_set = None
    ring = None
    if n_ranks > 1:
        if algo == "multicolor":
            for k in (4, 2, 1):
                try:
                    tree_set = build_multicolor_trees(n_ranks, k=k)
                    break
                except (InvalidConfig, DisjointnessViolation):
                    continue
        elif algo == "ring":
            ring = build_ring(n_ranks)
    return tree_set, ring


def run_training(
    cfg: TrainConfig,
    corpus: list[Record],
    algo: str = "multicolor",
    *,
    backend: str = "sim",
    network=None,
    rendezvous=None,
) -> TrainResult:
    """Train for cfg.epochs over the corpus, one rank per node.

    Each epoch optionally reshuffles the dataset store, then runs
    floor(len(corpus) / effective_batch) steps (at least one). Metrics
    are identical on every rank; rank 0's copy is returned.
    """
    if not corpus:
        raise InvalidConfig("corpus must be non-empty")
    blob, index = build_blob(corpus)
    entries = parse_index(index)
    steps_per_epoch = max(1, len(corpus) // cfg.effective_batch)

    def program(ep):
        store = shard_from_bytes(blob, entries, ep.rank, ep.n_ranks, cfg.group_size)
        model = ToyModel.create(
            n_in=len(corpus[0].bytes) // 4, hidden=cfg.hidden, seed=cfg.seed
        )
        tree_set, ring = comm_plan(ep.n_ranks, algo)
        clock = getattr(ep, "now", time.perf_counter)
        t_start = clock()
        history: list[EpochMetrics] = []
        rows: list[StepStats] = []
        gstep = 0
        for epoch in range(cfg.epochs):
            if cfg.shuffle_every > 0 and epoch % cfg.shuffle_every == 0:
                store = shuffle_all(
                    ep, store, seed=_mix64(cfg.seed, _SHUFFLE_ROLE, epoch)
                )
            t0 = clock()
            loss_sum = 0.0
            correct = 0
            for _ in range(steps_per_epoch):
                model, st = train_step(
                    ep,
                    model,
                    cfg,
                    store,
                    algo,
                    step=gstep,
                    epoch=gstep / steps_per_epoch,
                    tree_set=tree_set,
                    ring=ring,
                )
                st = replace(st, elapsed_s=clock() - t_start)
                rows.append(st)
                loss_sum += st.loss
                correct += st.correct
                gstep += 1
            history.append(
                EpochMetrics(
                    epoch=epoch,
                    loss=loss_sum / steps_per_epoch,
                    acc=correct / (steps_per_epoch * cfg.effective_batch),
                    time_s=clock() - t0,
                )
            )
        return model.weights, history, rows

    rr = run_ranks(
        cfg.n_nodes, backend, program, network=network, rendezvous=rendezvous
    )
    weights, history, rows = rr.results[0]
    return TrainResult(
        history=history,
        steps=rows,
        weights=weights,
        virtual_time=rr.virtual_time,
        wall_time=rr.wall_time,
    )


def metrics_csv(result: TrainResult) -> str:
    """Per-step metrics stream: epoch,step,loss,acc,lr,elapsed_s."""
    lines = ["epoch,step,loss,acc,lr,elapsed_s"]
    for st in result.steps:
        lines.append(
            f"{int(st.epoch)},{st.step},{st.loss:.6g},{st.acc:.6g},"
            f"{st.lr:.6g},{st.elapsed_s:.6g}"
        )
    return "\n".join(lines) + "\n"
