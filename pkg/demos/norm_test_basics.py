"""
Norm tests on a toy problem
===========================

Compare the per-sample and worker-level variance estimates and watch the
batch size that each would prescribe.
"""
import numpy as np

from adabatch import objectives
from adabatch.batch_controller import (
    BatchPlan,
    NormTestConfig,
    approx_norm_test,
    ddp_norm_test,
    exact_variance_expectation,
    minimal_exact_batch,
)
from adabatch.trainer import accumulate_minibatch_grad, split_batch

obj = objectives.Objective("logistic", objectives.make_dataset("logistic", 2000, 10, seed=0))
rng = np.random.default_rng(0)
w = rng.standard_normal(obj.dim) * 0.5

# per-sample statistic on a batch of 64
batch = objectives.sample_batch(rng, obj.n, 64)
G = obj.per_sample_grads(w, batch)
out = approx_norm_test(G, eta=0.2)
print(f"per-sample test  : statistic {out.statistic:8.2f}  passed={out.passed}  next b={out.raw_next}")

# same batch seen by J=8 workers, each holding 8 samples
J = 8
worker_grads = [accumulate_minibatch_grad(obj, w, mbs) for mbs in split_batch(batch, J, 1)]
plan = BatchPlan.from_global(64, J, 1)
out = ddp_norm_test(worker_grads, np.mean(worker_grads, axis=0), plan, NormTestConfig(eta=0.2))
print(f"worker-level test: statistic {out.statistic:8.2f}  passed={out.passed}  next b={out.next_plan.global_}")
# worker gradients are means of 8 samples, so their spread is ~1/8 of the per-sample spread
out = ddp_norm_test(worker_grads, np.mean(worker_grads, axis=0), plan,
                    NormTestConfig(eta=0.2, variance_scale="per_sample"))
print(f"  rescaled by b/J: statistic {out.statistic:8.2f}  passed={out.passed}  next b={out.next_plan.global_}")

# with all per-sample gradients the expectation is exact
G_all = obj.per_sample_grads(w)
full = G_all.mean(axis=0)
for b in (16, 64, 256, 1024):
    ratio = exact_variance_expectation(G_all, b) / (full @ full)
    print(f"b={b:5d}: E||g_B - g||^2 / ||g||^2 = {ratio:.4f}")
print("smallest b meeting eta=0.2:", minimal_exact_batch(G_all, 0.2))
print("smallest b meeting the coordinate-wise condition:", minimal_exact_batch(G_all, 0.2, coordinatewise=True))
