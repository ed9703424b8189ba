"""Norm tests and batch-size updates.

The distributed loop uses :func:`ddp_norm_test`, which estimates gradient
variance from the J per-worker minibatch gradients. The per-sample tests
(:func:`approx_norm_test`, :func:`exact_variance_expectation`,
:func:`esg_check`) need every per-sample gradient and serve as reference
checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .collectives import GradReport
from .tensor_core import ParamVector, coordinatewise_variance, l1_norm, l2_norm_squared

VARIANCE_SCALES = ("as_written", "per_sample")


@dataclass(frozen=True)
class NormTestConfig:
    """Settings of the adaptive schedule.

    ``variance_scale="as_written"`` compares ``||Var_hat||_1 / (eta^2 ||g||^2)``
    directly with the global batch size. ``"per_sample"`` first multiplies
    the worker-gradient variance by the minibatch size, turning it into a
    per-sample variance estimate.
    """

    eta: float = 0.2
    test_interval: int = 1
    max_global_batch: int = 8192
    finite_population_correction: bool = False
    grad_norm_floor: float = 1e-12
    variance_scale: str = "as_written"

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.test_interval < 1:
            raise ValueError("test_interval must be >= 1")
        if self.max_global_batch < 1:
            raise ValueError("max_global_batch must be >= 1")
        if self.grad_norm_floor < 0:
            raise ValueError("grad_norm_floor must be >= 0")
        if self.variance_scale not in VARIANCE_SCALES:
            raise ValueError(f"variance_scale must be one of {VARIANCE_SCALES}")


@dataclass(frozen=True)
class BatchPlan:
    """``global_ = workers * minibatch`` and ``minibatch = accumulation_steps * microbatch``."""

    global_: int
    minibatch: int
    microbatch: int
    workers: int
    accumulation_steps: int

    def __post_init__(self):
        if min(self.global_, self.minibatch, self.microbatch, self.workers, self.accumulation_steps) < 1:
            raise ValueError("all batch plan entries must be positive")
        if self.global_ != self.workers * self.minibatch or self.minibatch != self.accumulation_steps * self.microbatch:
            raise ValueError(f"inconsistent batch plan {self}")

    @classmethod
    def from_global(cls, b: int, J: int, M: int) -> "BatchPlan":
        if b % (J * M):
            raise ValueError(f"global batch {b} is not divisible by J*M = {J * M}")
        micro = b // (J * M)
        return cls(b, M * micro, micro, J, M)


@dataclass(frozen=True)
class TestOutcome:
    statistic: float
    variance_l1: float
    grad_norm_sq: float
    passed: bool
    next_plan: BatchPlan | None = None
    skipped: bool = False
    raw_next: int | None = None
    batch_size: int | None = None

    @property
    def ratio(self) -> float:
        """Left side over right side of the tested inequality (``statistic / b``)."""
        return self.statistic / self.batch_size if self.batch_size else float("nan")


def per_sample_variance_l1(per_sample_grads) -> float:
    """L1 norm of the unbiased coordinate-wise variance of per-sample gradients."""
    grads = np.asarray(per_sample_grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[0] < 2:
        raise ValueError("need at least two per-sample gradients")
    return l1_norm(coordinatewise_variance(grads, "count_minus_one"))


def approx_norm_test(per_sample_grads, eta: float, n: int | None = None, use_correction: bool = False,
                     grad_norm_floor: float = 1e-12) -> TestOutcome:
    """Per-sample norm test on one batch.

    Passes when ``c * ||Var||_1 / b <= eta^2 ||g||^2`` with ``c = (n-b)/(n-1)``
    if ``use_correction`` else 1. ``statistic = c * ||Var||_1 / (eta^2 ||g||^2)``
    and, on failure, ``raw_next = ceil(statistic)``.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    grads = np.asarray(per_sample_grads, dtype=np.float64)
    b = grads.shape[0]
    var_l1 = per_sample_variance_l1(grads)
    if use_correction:
        if n is None or n < b:
            raise ValueError("finite population correction needs n >= b")
        var_l1 *= (n - b) / (n - 1)
    gbar = grads.mean(axis=0)
    gsq = l2_norm_squared(gbar)
    if gsq < grad_norm_floor:
        return TestOutcome(float("nan"), var_l1, gsq, True, skipped=True, batch_size=b)
    stat = var_l1 / (eta * eta * gsq)
    passed = stat <= b
    return TestOutcome(stat, var_l1, gsq, passed, raw_next=None if passed else math.ceil(stat), batch_size=b)


def _gradient_stack(worker_grads: Sequence[GradReport | ParamVector]) -> tuple[np.ndarray, int | None]:
    counts = {r.sample_count for r in worker_grads if isinstance(r, GradReport)}
    if len(counts) > 1:
        raise ValueError(f"worker minibatch sizes differ: {sorted(counts)}")
    stack = np.vstack([r.gradient if isinstance(r, GradReport) else np.asarray(r, dtype=np.float64)
                       for r in worker_grads])
    return stack, counts.pop() if counts else None


def ddp_variance_estimator(worker_grads: Sequence[GradReport | ParamVector], global_grad) -> ParamVector:
    """``(1/J) sum_j (g_j - g)^2`` coordinate-wise, ``g`` the global batch gradient."""
    stack, _ = _gradient_stack(worker_grads)
    if stack.shape[0] < 2:
        raise ValueError("the worker variance needs J >= 2 workers")
    g = np.asarray(global_grad, dtype=np.float64)
    if g.shape != stack.shape[1:]:
        raise ValueError("global gradient dimension does not match worker gradients")
    dev = stack - g
    return np.sum(dev * dev, axis=0) / stack.shape[0]


def round_batch_plan(raw_next: int, J: int, M: int, max_global: int) -> BatchPlan:
    """Clamp ``raw_next`` to ``max_global``, then round up to the ``J*M`` grid."""
    if raw_next < 1 or J < 1 or M < 1:
        raise ValueError("raw_next, J and M must be >= 1")
    target = min(raw_next, max_global)
    micro = -(-target // (J * M))
    mini = M * micro
    return BatchPlan(J * mini, mini, micro, J, M)


def norm_test_from_variance(var_hat_l1: float, grad_norm_sq: float, plan: BatchPlan,
                            cfg: NormTestConfig) -> TestOutcome:
    """Decision step shared by every caller that already holds the reduced quantities."""
    if cfg.variance_scale == "per_sample":
        var_hat_l1 = var_hat_l1 * plan.minibatch
    if grad_norm_sq < cfg.grad_norm_floor:
        return TestOutcome(float("nan"), var_hat_l1, grad_norm_sq, True, plan, skipped=True,
                           batch_size=plan.global_)
    stat = var_hat_l1 / (cfg.eta ** 2 * grad_norm_sq)
    if stat <= plan.global_:
        return TestOutcome(stat, var_hat_l1, grad_norm_sq, True, plan, batch_size=plan.global_)
    raw = math.ceil(stat) if math.isfinite(stat) else cfg.max_global_batch
    nxt = round_batch_plan(raw, plan.workers, plan.accumulation_steps, cfg.max_global_batch)
    if nxt.global_ < plan.global_:
        nxt = plan
    return TestOutcome(stat, var_hat_l1, grad_norm_sq, False, nxt, raw_next=raw, batch_size=plan.global_)


def ddp_norm_test(worker_grads: Sequence[GradReport | ParamVector], global_grad, plan: BatchPlan,
                  cfg: NormTestConfig) -> TestOutcome:
    """Data-parallel norm test from per-worker minibatch gradients."""
    stack, count = _gradient_stack(worker_grads)
    if stack.shape[0] != plan.workers:
        raise ValueError(f"expected {plan.workers} worker gradients, got {stack.shape[0]}")
    if count is not None and count != plan.minibatch:
        raise ValueError(f"worker sample count {count} does not match plan minibatch {plan.minibatch}")
    var_hat = ddp_variance_estimator(list(stack), global_grad)
    return norm_test_from_variance(l1_norm(var_hat), l2_norm_squared(global_grad), plan, cfg)


def clamp_plan_to_population(plan: BatchPlan, n: int) -> BatchPlan:
    """Largest plan on the ``J*M`` grid that does not exceed the population ``n``."""
    if plan.global_ <= n:
        return plan
    grid = plan.workers * plan.accumulation_steps
    if n < grid:
        raise ValueError(f"population n={n} is smaller than one sample per microbatch ({grid})")
    return BatchPlan.from_global((n // grid) * grid, plan.workers, plan.accumulation_steps)


# -- exact-variance reference tests -------------------------------------------

def _population_stats(per_sample_grads):
    G = np.asarray(per_sample_grads, dtype=np.float64)
    if G.ndim != 2:
        raise ValueError("per-sample gradients must be an (n, d) array")
    full = G.mean(axis=0)
    dev = G - full
    return G.shape[0], full, np.mean(dev * dev, axis=0)


def _sampling_factor(n: int, b: int) -> float:
    if not 1 <= b <= n:
        raise ValueError(f"batch size b={b} must satisfy 1 <= b <= n={n}")
    return 0.0 if n == 1 else (n - b) / (b * (n - 1))


def exact_variance_expectation(per_sample_grads, b: int) -> float:
    """``E ||g_B - g||^2`` for a batch of size ``b`` drawn without replacement.

    Closed form: ``(1/b) * (n-b)/(n-1) * mean_i ||g_i - g||^2``.
    """
    n, _, pop_var = _population_stats(per_sample_grads)
    return _sampling_factor(n, b) * float(np.sum(pop_var))


def minimal_exact_batch(per_sample_grads, eta: float, coordinatewise: bool = False) -> int:
    """Smallest ``b`` for which the exact-variance norm test holds.

    With ``coordinatewise=True`` every coordinate must satisfy its own test;
    coordinates whose full gradient vanishes but whose variance does not can
    only be satisfied at ``b = n``.
    """
    n, full, pop_var = _population_stats(per_sample_grads)
    if coordinatewise:
        s = pop_var
        r = eta * eta * full * full
    else:
        s = np.array([np.sum(pop_var)])
        r = np.array([eta * eta * float(np.dot(full, full))])
    # s (n - b) <= r b (n - 1)  <=>  b >= s n / (r (n - 1) + s)
    need = np.ones_like(s)
    active = s > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = s[active] * n / (r[active] * (n - 1) + s[active])
    need[active] = bound
    b = int(math.ceil(float(np.max(need)) - 1e-12))
    return min(max(b, 1), n)


@dataclass(frozen=True)
class ESGResult:
    satisfied: np.ndarray
    margin: np.ndarray
    unsatisfiable: np.ndarray

    @property
    def all_satisfied(self) -> bool:
        return bool(np.all(self.satisfied))


def esg_check(per_sample_grads, b: int, eta: float) -> ESGResult:
    """Coordinate-wise expected strong growth at batch size ``b``.

    For each coordinate ``E[(g_B)_i^2] = g_i^2 + (1/b)(n-b)/(n-1) var_i`` is
    compared against ``(1 + eta^2) g_i^2``. ``margin`` is the right side minus
    the left side. Coordinates with zero mean gradient and positive variance
    are flagged in ``unsatisfiable`` when ``b < n``.
    """
    n, full, pop_var = _population_stats(per_sample_grads)
    second_moment = full * full + _sampling_factor(n, b) * pop_var
    bound = (1.0 + eta * eta) * full * full
    margin = bound - second_moment
    tol = 1e-12 * np.maximum(1.0, np.abs(bound))
    satisfied = margin >= -tol
    unsatisfiable = (full == 0.0) & (pop_var > 0.0) & (b < n)
    return ESGResult(satisfied, margin, unsatisfiable)
