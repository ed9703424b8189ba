"""
Adam hyperparameter condition
=============================

Which beta1 values the convergence condition admits, and what plain Adam
does on a small network when each step uses a batch large enough for the
exact variance test.
"""
import numpy as np

from adabatch.objectives import Objective, make_dataset
from adabatch.optim import AdamConfig, theorem_condition, theorem_constant_c1
from adabatch.trainer import run_exact_variance_adam

for beta2 in (0.95, 0.99, 0.999):
    ok, thr = theorem_condition(0.5, beta2, 0.1)
    print(f"beta2={beta2}: beta1 must be <= {thr:.4f}")
print("common choice (0.9, 0.95) admissible:", theorem_condition(0.9, 0.95, 0.1)[0])
print("c1 at alpha=1e-3, (0.5, 0.95), L=sigma=1, d=10:", theorem_constant_c1(1e-3, 0.5, 0.95, 0.1, 1.0, 1.0, 10))

adam = AdamConfig(alpha=1e-3, beta1=0.5, beta2=0.95, eps=0.0, weight_decay=0.0, clip_norm=None, form="theory")
obj = Objective("mlp", make_dataset("mlp", 500, 4, seed=0), hidden=8)
tr = run_exact_variance_adam(obj, 2000, adam, eta=0.1)
g = np.array(tr.grad_norms)
for k in (0, 250, 500, 1000, 1999):
    print(f"step {k:4d}: ||grad|| {g[k]:.2e}  batch {tr.batch_sizes[k]:3d}  loss {tr.losses[k]:.5f}")
print(f"mean ||grad|| first half {g[:1000].mean():.3e}, second half {g[1000:].mean():.3e}")
