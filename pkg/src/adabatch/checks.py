"""Fast self-checks against brute-force and closed-form references.

Run with ``adabatch check``. Each check returns ``(name, passed, detail)``.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from .batch_controller import (
    ddp_variance_estimator,
    exact_variance_expectation,
    per_sample_variance_l1,
    round_batch_plan,
)
from .collectives import make_even_shards, spawn_group
from .objectives import Objective, make_dataset
from .optim import theorem_condition
from .tensor_core import l1_norm


def brute_force_variance(G: np.ndarray, b: int) -> float:
    """Average of ``||g_B - g||^2`` over every size-``b`` subset."""
    full = G.mean(axis=0)
    total, count = 0.0, 0
    for subset in itertools.combinations(range(G.shape[0]), b):
        diff = G[list(subset)].mean(axis=0) - full
        total += float(diff @ diff)
        count += 1
    return total / count


def check_exact_variance():
    worst = 0.0
    for kind in ("quadratic", "logistic"):
        obj = Objective(kind, make_dataset(kind, 9, 3, seed=0))
        G = obj.per_sample_grads(np.random.default_rng(1).standard_normal(obj.dim))
        for b in range(2, 9):
            ref = brute_force_variance(G, b)
            worst = max(worst, abs(exact_variance_expectation(G, b) - ref) / ref)
    return "exact variance vs enumeration", worst <= 1e-12, f"max rel err {worst:.2e}"


def check_estimator_bridge():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        b = int(rng.integers(2, 12))
        G = rng.standard_normal((b, 4))
        lhs = l1_norm(ddp_variance_estimator(list(G), G.mean(axis=0)))
        rhs = (b - 1) / b * per_sample_variance_l1(G)
        worst = max(worst, abs(lhs - rhs) / rhs)
    return "worker-variance bridge", worst <= 1e-14, f"max rel err {worst:.2e}"


def check_rounding():
    plan = round_batch_plan(1000, 4, 16, 8192)
    ok = (plan.microbatch, plan.minibatch, plan.global_) == (16, 256, 1024)
    return "microbatch rounding cascade", ok, f"1000 -> {plan.global_}"


def check_gradients():
    worst = 0.0
    for kind in ("quadratic", "logistic", "mlp"):
        obj = Objective(kind, make_dataset(kind, 5, 3, seed=3), hidden=4)
        rng = np.random.default_rng(4)
        w = rng.standard_normal(obj.dim)
        for i in range(obj.n):
            g = obj.per_sample_grad(w, i)
            fd = obj.finite_diff_grad(w, 1e-6, idx=[i])
            worst = max(worst, np.linalg.norm(g - fd) / (1 + np.linalg.norm(g)))
    return "analytic vs central differences", worst <= 1e-5, f"max rel err {worst:.2e}"


def check_collectives():
    layout = make_even_shards(5, 2)
    vecs = [np.arange(5.0), np.arange(5.0) * 3]

    def body(rank, h):
        return h.all_reduce(vecs[rank]), h.all_gather(h.reduce_scatter(vecs[rank], layout), layout)

    res = spawn_group(2, body)
    ok = all(np.array_equal(a, b) and np.array_equal(a, np.arange(5.0) * 2) for a, b in res)
    return "all-reduce equals reduce-scatter + all-gather", ok, ""


def check_theorem():
    adm, thr = theorem_condition(0.5, 0.95, 0.1)
    adm9, _ = theorem_condition(0.9, 0.95, 0.1)
    ok = adm and not adm9 and math.isclose(thr, 0.52704, abs_tol=1e-4)
    return "beta1 admissibility threshold", ok, f"threshold {thr:.5f}"


CHECKS = (check_exact_variance, check_estimator_bridge, check_rounding, check_gradients,
          check_collectives, check_theorem)


def run_checks(out=print) -> bool:
    all_ok = True
    for fn in CHECKS:
        name, ok, detail = fn()
        all_ok &= ok
        out(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    return all_ok
