"""Scratch checks for sgd: lr schedule, gradients, serial equivalence, training."""
import numpy as np

from minidist import _kernels
from minidist.collectives import GradientBuffer, make_segment_schedule
from minidist.dimd import BatchRequest, build_blob, parse_index, random_batch, shard_from_bytes
from minidist.sgd import (
    EpochMetrics,
    LrSchedule,
    StepStats,
    ToyModel,
    TrainConfig,
    comm_plan,
    grad,
    lr_at,
    lr_schedule,
    make_synthetic_corpus,
    metrics_csv,
    node_gradient,
    run_training,
    sample_node_batch,
    train_step,
)
from minidist.topology import build_multicolor_trees
from minidist.transport.runner import run_ranks

# lr schedule examples
s = LrSchedule(0.1, k=64, n=4, warmup_epochs=5, drop_every=30, drop_factor=10.0)
assert lr_at(s, 0.0) == 0.1 and lr_at(s, 2.5) == 0.1 and lr_at(s, 5.0) == 0.1
s2 = LrSchedule(0.1, k=32, n=256, warmup_epochs=5, drop_every=30, drop_factor=10.0)
assert lr_at(s2, 5.0) == 3.2 and abs(lr_at(s2, 0.0) - 0.1) < 1e-15
assert abs(lr_at(s2, 35.0) - 0.32) < 1e-12, lr_at(s2, 35.0)
assert abs(lr_at(s2, 34.999) - 3.2) < 1e-12
assert abs(lr_at(s2, 65.0) - 0.032) < 1e-13
# continuity at warmup boundary
assert abs(lr_at(s2, 4.9999999) - lr_at(s2, 5.0)) < 1e-5
print("lr schedule: ok")

# zero-weight symmetry: softmax-minus-onehot rows sum to 0 -> db2 sums to 0
m0 = ToyModel(np.zeros(172, dtype=np.float32))
g, loss, corr = m0.loss_and_grad_sum(np.ones((2, 16)), np.array([0, 1]))
db2 = g[-4:]
assert abs(float(db2.sum())) < 1e-6, db2
assert abs(loss - 2 * np.log(4.0)) < 1e-9  # uniform probs
print("zero-weight symmetry: ok")

# duplicated batch mean invariance
m = ToyModel.create(seed=3)
x = np.random.default_rng(0).standard_normal(16)
g1 = grad(m, [(x, 2)]).data
g2 = grad(m, [(x, 2), (x, 2)]).data
assert np.array_equal(g1, g2)
print("mean invariance: ok")

# finite differences, 100 random (model, sample) pairs
rng = np.random.default_rng(42)
worst = 0.0
for trial in range(100):
    mm = ToyModel.create(seed=int(rng.integers(1 << 30)))
    xs = rng.standard_normal((1, 16))
    ys = np.array([int(rng.integers(4))])
    ga, _, _ = mm.loss_and_grad_sum(xs, ys)
    h = 1e-3
    for i in rng.choice(mm.n_params, size=12, replace=False):
        wp = mm.weights.copy(); wp[i] += h
        wm = mm.weights.copy(); wm[i] -= h
        hp = float(wp[i]) - float(mm.weights[i])
        hm = float(mm.weights[i]) - float(wm[i])
        lp = ToyModel(wp).loss_sum(xs, ys)
        lm = ToyModel(wm).loss_sum(xs, ys)
        fd = (lp - lm) / (hp + hm)
        denom = max(abs(fd), abs(float(ga[i])), 1e-8)
        rel = abs(fd - float(ga[i])) / denom
        worst = max(worst, rel)
assert worst < 1e-4, worst
print(f"finite differences: ok (max rel {worst:.2e})")

# serial-replay oracle for the allreduce fold (order-matched, multicolor)
def oracle_allreduce_mc(bufs, ts, segment_elems=16384):
    n = len(bufs[0])
    out = [b.copy() for b in bufs]
    sched = make_segment_schedule(n, ts.k, segment_elems)
    for color, segs in enumerate(sched.per_color):
        tree = ts.trees[color]
        def fold(rank, lo, hi):
            acc = bufs[rank][lo:hi].copy()
            for c in tree.children[rank]:
                _kernels.add_f32(acc, fold(c, lo, hi))
            return acc
        for (lo, hi) in segs:
            total = fold(tree.root, lo, hi)
            for b in out:
                b[lo:hi] = total
    return out

# N=4 m=2 k=4 distributed vs serial, bitwise for 50 steps
cfg = TrainConfig(n_nodes=4, workers_per_node=2, per_worker_batch=4, epochs=1,
                  shuffle_every=0, seed=9)
corpus = make_synthetic_corpus(512, seed=9)
blob, index = build_blob(corpus)
entries = parse_index(index)
ts = build_multicolor_trees(4, k=4)

def dist_body(ep):
    store = shard_from_bytes(blob, entries, ep.rank, ep.n_ranks, 1)
    model = ToyModel.create(seed=cfg.seed)
    for step in range(50):
        model, st = train_step(ep, model, cfg, store, "multicolor", step=step,
                               epoch=step / 16.0, tree_set=ts)
    return model.weights

rr = run_ranks(4, "sim", dist_body)
dist_w = rr.results[0]
for w in rr.results[1:]:
    assert np.array_equal(w, dist_w)

# serial replay: same sampling, same fold orders
store0 = shard_from_bytes(blob, entries, 0, 1, 1)
model = ToyModel.create(seed=cfg.seed)
sched = lr_schedule(cfg)
for step in range(50):
    node_bufs = []
    for rank in range(4):
        batches = sample_node_batch(store0, cfg, rank, step)
        node_bufs.append(node_gradient(model, batches))
    summed = oracle_allreduce_mc(node_bufs, ts)[0]
    lr = lr_at(sched, step / 16.0)
    _kernels.sub_scaled_f32(model.weights, summed[:172], lr / cfg.effective_batch)
serial_w = model.weights
assert np.array_equal(serial_w, dist_w), "serial replay mismatch"
print("serial bitwise equivalence, 50 steps: ok")

# cross-algorithm tolerance: multicolor vs ring, 10 steps
def body_algo(algo):
    def body(ep):
        store = shard_from_bytes(blob, entries, ep.rank, ep.n_ranks, 1)
        model = ToyModel.create(seed=cfg.seed)
        tset, ring = comm_plan(ep.n_ranks, algo)
        for step in range(10):
            model, _ = train_step(ep, model, cfg, store, algo, step=step,
                                  epoch=0.0, tree_set=tset, ring=ring)
        return model.weights
    return body

wa = run_ranks(4, "sim", body_algo("multicolor")).results[0]
wb = run_ranks(4, "sim", body_algo("ring")).results[0]
rel = np.max(np.abs(wa.astype(np.float64) - wb) / np.maximum(np.abs(wa), 1e-6))
assert rel <= 1e-5, rel
print(f"cross-algorithm 10 steps: ok (max rel {rel:.2e})")

# run_training end to end: convergence on separable data
cfg_t = TrainConfig(n_nodes=4, workers_per_node=2, per_worker_batch=8, epochs=20, seed=1)
res = run_training(cfg_t, make_synthetic_corpus(2048, seed=1), "multicolor")
print("acc per epoch:", [round(h.acc, 3) for h in res.history])
assert res.final_acc > 0.95, res.final_acc
assert res.history[0].loss > res.history[-1].loss
csv = metrics_csv(res)
assert csv.startswith("epoch,step,loss,acc,lr,elapsed_s\n")
assert len(csv.strip().splitlines()) == 1 + len(res.steps)
print(f"run_training converges: ok (final acc {res.final_acc:.3f})")

# N=1 degenerate: plain serial SGD, loss decreases
cfg_1 = TrainConfig(n_nodes=1, workers_per_node=1, per_worker_batch=16, epochs=1, seed=4)
res1 = run_training(cfg_1, make_synthetic_corpus(256, seed=4), "multicolor")
losses = [s.loss for s in res1.steps]
assert losses[-1] < losses[0]
print("N=1 descent: ok")

# N=4 vs N=1 with matched effective batch and worker count -> close loss curves
cfg_a = TrainConfig(n_nodes=4, workers_per_node=2, per_worker_batch=4, epochs=2,
                    shuffle_every=0, seed=6)
cfg_b = TrainConfig(n_nodes=1, workers_per_node=8, per_worker_batch=4, epochs=2,
                    shuffle_every=0, seed=6)
corp = make_synthetic_corpus(640, seed=6)
ra = run_training(cfg_a, corp, "multicolor")
rb = run_training(cfg_b, corp, "multicolor")
diffs = [abs(a.loss - b.loss) for a, b in zip(ra.steps, rb.steps)]
assert max(diffs) < 1e-4, max(diffs)
print(f"layout equivalence: ok (max loss diff {max(diffs):.2e})")

# divergence detection: perturb one rank's weights
from minidist.errors import DivergenceDetected
from minidist.sgd import check_replicas

def bad_body(ep):
    w = np.zeros(10, dtype=np.float32)
    if ep.rank == 2:
        w[0] = 1.0
    check_replicas(ep, w, step=0)

try:
    run_ranks(4, "sim", bad_body)
    raise SystemExit("divergence not detected")
except DivergenceDetected:
    pass
print("divergence detection: ok")

# ablation: never shuffle, partitioned store, accuracy still improves
cfg_ab = TrainConfig(n_nodes=4, workers_per_node=1, per_worker_batch=8, epochs=8,
                     shuffle_every=0, group_size=4, seed=2)
res_ab = run_training(cfg_ab, make_synthetic_corpus(1024, seed=2), "multicolor")
assert res_ab.history[-1].acc > res_ab.history[0].acc
print("no-shuffle ablation: ok")

print("ALL SGD SMOKE OK")
