"""
Simulated worker groups
=======================

Ranks are threads exchanging arrays through mailboxes. A sharded reduction
(reduce-scatter then all-gather) returns exactly the all-reduce result.
"""
import numpy as np

from adabatch.collectives import make_even_shards, spawn_group
from adabatch.trainer import ObjectiveSpec, TrainConfig, run_training

J, d = 4, 10
layout = make_even_shards(d, J)
print("shard layout:", [(s.start, s.stop) for s in layout])

local = [np.random.default_rng(r).standard_normal(d) for r in range(J)]


def body(rank, h):
    full = h.all_reduce(local[rank])
    mine = h.reduce_scatter(local[rank], layout)
    return full, h.all_gather(mine, layout)


for rank, (full, gathered) in enumerate(spawn_group(J, body)):
    print(f"rank {rank}: bit-equal = {np.array_equal(full, gathered)}")

# whole training runs agree too, and the serial scheduler gives the same answer
base = dict(objective=ObjectiveSpec("quadratic", n=2048, d=16, holdout=256), workers=4, initial_batch=16,
            sample_budget=20000)
runs = {
    "replicated": run_training(TrainConfig(**base)),
    "sharded": run_training(TrainConfig(parallel_mode="sharded", **base)),
    "serial": run_training(TrainConfig(scheduler="serial", **base)),
}
for name, m in runs.items():
    print(f"{name:10s} steps {m.steps:4d}  final batch {m.batch_sizes[-1]:5d}  last loss {m.records[-1].train_loss:.6f}")
