"""Distributed training loop with adaptive, constant or stagewise batch sizes.

Every rank runs the same loop (SPMD). Ranks draw identical global batches
from a shared-seed stream, each computes the gradient of its own
minibatch by accumulating over M microbatches, and the global gradient is
formed with ``all_reduce`` (replicated mode) or ``reduce_scatter`` followed
by ``all_gather`` (sharded mode, where each rank owns one parameter shard
and its optimizer state).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .batch_controller import (
    BatchPlan,
    NormTestConfig,
    clamp_plan_to_population,
    ddp_norm_test,
    minimal_exact_batch,
    norm_test_from_variance,
)
from .collectives import WorkerHandle, make_even_shards, spawn_group
from .objectives import Dataset, Objective, make_dataset, make_holdout, sample_batch
from .optim import AdamConfig, LrSchedule, OptimState, clip_scale, lr_at, optimizer_step
from .tensor_core import ParamVector, RngStream, l1_norm, l2_norm_squared

log = logging.getLogger(__name__)

SCHEDULE_MODES = ("adaptive", "constant", "stagewise")
PARALLEL_MODES = ("replicated", "sharded")

# Stream ids for training randomness; dataset synthesis uses 0-2.
INIT_STREAM = 10
SAMPLING_STREAM = 11
DEBUG_STREAM = 12


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "quadratic"
    n: int = 4096
    d: int = 32
    hidden: int = 16
    holdout: int = 1024
    noise: float = 0.1
    flip_rate: float = 0.05

    def build(self, seed: int) -> tuple[Objective, Dataset]:
        ds = make_dataset(self.kind, self.n, self.d, seed, noise=self.noise, flip_rate=self.flip_rate)
        return Objective(self.kind, ds, self.hidden), make_holdout(ds, self.holdout)


@dataclass(frozen=True)
class CostModel:
    """Deterministic stand-in for wall-clock time, in simulated seconds."""

    step_latency: float = 1e-3
    sample_cost: float = 1e-5
    collective_latency: float = 2e-4

    def step_seconds(self, plan: BatchPlan, collectives: int) -> float:
        return self.step_latency + self.sample_cost * plan.minibatch + self.collective_latency * collectives


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    workers: int = 4
    accumulation_steps: int = 1
    initial_batch: int = 64
    norm_test: NormTestConfig = field(default_factory=NormTestConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    lr_schedule: LrSchedule | None = None
    sample_budget: int = 100_000
    schedule_mode: str = "adaptive"
    constant_batch: int | None = None
    stages: tuple[tuple[float, int], ...] = ()
    parallel_mode: str = "replicated"
    seed: int = 0
    val_interval: int = 10
    scheduler: str = "threads"
    clock: str = "simulated"
    cost_model: CostModel = field(default_factory=CostModel)
    debug_recheck: bool = False

    def __post_init__(self):
        J, M = self.workers, self.accumulation_steps
        grid = J * M
        if J < 1 or M < 1:
            raise ValueError("workers and accumulation_steps must be >= 1")
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ValueError(f"schedule_mode must be one of {SCHEDULE_MODES}")
        if self.parallel_mode not in PARALLEL_MODES:
            raise ValueError(f"parallel_mode must be one of {PARALLEL_MODES}")
        if self.clock not in ("simulated", "wall"):
            raise ValueError("clock must be 'simulated' or 'wall'")
        if self.initial_batch < 1 or self.initial_batch % grid:
            raise ValueError(f"initial_batch={self.initial_batch} must be a positive multiple of J*M={grid}")
        if self.norm_test.max_global_batch % grid:
            raise ValueError(f"max_global_batch={self.norm_test.max_global_batch} must be a multiple of J*M={grid}")
        if self.sample_budget < 1:
            raise ValueError("sample_budget must be >= 1")
        if self.val_interval < 1:
            raise ValueError("val_interval must be >= 1")
        if self.schedule_mode == "adaptive" and J < 2:
            raise ValueError("the adaptive schedule estimates variance across workers and needs workers >= 2")
        if self.schedule_mode == "constant":
            if self.constant_batch is None or self.constant_batch < 1 or self.constant_batch % grid:
                raise ValueError(f"constant_batch must be a positive multiple of J*M={grid}")
        if self.schedule_mode == "stagewise":
            if not self.stages:
                raise ValueError("stagewise mode needs at least one stage")
            if not math.isclose(sum(f for f, _ in self.stages), 1.0, abs_tol=1e-9):
                raise ValueError("stage fractions must sum to 1")
            for f, b in self.stages:
                if f <= 0 or b < 1 or b % grid:
                    raise ValueError(f"stage ({f}, {b}) needs fraction > 0 and a batch that is a multiple of {grid}")
        if self.parallel_mode == "sharded" and self.param_dim < J:
            raise ValueError(f"cannot shard {self.param_dim} parameters over {J} workers")

    @property
    def param_dim(self) -> int:
        o = self.objective
        return o.hidden * o.d + 2 * o.hidden + 1 if o.kind == "mlp" else o.d

    @property
    def schedule(self) -> LrSchedule:
        if self.lr_schedule is not None:
            return self.lr_schedule
        return LrSchedule(4e-4, 4e-5, self.sample_budget // 100, self.sample_budget)


@dataclass
class StepRecord:
    step: int
    samples: int
    batch_size: int
    lr: float
    train_loss: float
    grad_norm: float
    test_statistic: float | None = None
    val_loss: float | None = None
    elapsed_seconds: float = 0.0


@dataclass
class RunMetrics:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    @property
    def batch_sizes(self) -> list[int]:
        return self.column("batch_size")

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def samples(self) -> int:
        return self.records[-1].samples if self.records else 0

    @property
    def final_val_loss(self) -> float | None:
        vals = [r.val_loss for r in self.records if r.val_loss is not None]
        return vals[-1] if vals else None


def split_batch(batch, J: int, M: int) -> list[list[np.ndarray]]:
    """Contiguous rank-major, accumulation-minor blocks: ``out[j][m]``."""
    batch = np.asarray(batch)
    if batch.size % (J * M):
        raise ValueError(f"batch of {batch.size} cannot be split evenly over J*M = {J * M}")
    blocks = batch.reshape(J, M, -1)
    return [[blocks[j, m] for m in range(M)] for j in range(J)]


def accumulate_minibatch_grad(obj: Objective, w: ParamVector, microbatches, M: int | None = None) -> ParamVector:
    """``sum_m (1/M) grad_{B^m}(w)`` over one worker's microbatches."""
    M = len(microbatches) if M is None else M
    acc = np.zeros(obj.dim)
    for mb in microbatches:
        acc += obj.batch_grad(w, mb) / M
    return acc


def evaluate(obj: Objective, w: ParamVector, holdout: Dataset | None = None) -> float:
    """Mean per-sample loss on ``holdout`` (or on the training set)."""
    target = obj if holdout is None else obj.with_dataset(holdout)
    if target.n == 0:
        raise ValueError("holdout must be non-empty")
    return target.loss(w)


def _plan_for_samples(cfg: TrainConfig, plan: BatchPlan, samples: int) -> BatchPlan:
    J, M = cfg.workers, cfg.accumulation_steps
    if cfg.schedule_mode == "constant":
        return BatchPlan.from_global(cfg.constant_batch, J, M)
    if cfg.schedule_mode == "stagewise":
        bound = 0.0
        for frac, b in cfg.stages:
            bound += frac * cfg.sample_budget
            if samples < bound - 1e-9:
                return BatchPlan.from_global(b, J, M)
        return BatchPlan.from_global(cfg.stages[-1][1], J, M)
    return plan


def _worker_loop(rank: int, h: WorkerHandle, cfg: TrainConfig, obj: Objective, holdout: Dataset,
                 w0: ParamVector) -> RunMetrics | None:
    J, M = cfg.workers, cfg.accumulation_steps
    sharded = cfg.parallel_mode == "sharded"
    layout = make_even_shards(obj.dim, J) if sharded else None
    mine = layout[rank].slice if sharded else slice(None)
    rng = RngStream(cfg.seed, SAMPLING_STREAM).generator()
    debug_rng = RngStream(cfg.seed, DEBUG_STREAM).generator() if cfg.debug_recheck and rank == 0 else None
    schedule = cfg.schedule
    w = w0.copy()
    w_own = w[mine].copy()
    state = OptimState.for_config(obj.dim, cfg.adam).shard(mine)
    plan = _plan_for_samples(cfg, BatchPlan.from_global(cfg.initial_batch, J, M), 0)
    metrics = RunMetrics()
    samples, k, elapsed = 0, 1, 0.0
    t0 = time.perf_counter()

    def reduce_mean(x):
        if sharded:
            return h.all_gather(h.reduce_scatter(x, layout, "mean"), layout)
        return h.all_reduce(x, "mean")

    while samples < cfg.sample_budget:
        try:
            plan = clamp_plan_to_population(_plan_for_samples(cfg, plan, samples), obj.n)
            batch = sample_batch(rng, obj.n, plan.global_)
            micro = split_batch(batch, J, M)[rank]
            g_local = accumulate_minibatch_grad(obj, w, micro, M)
            loss_local = obj.loss(w, np.concatenate(micro))
        except Exception as exc:
            raise RuntimeError(f"rank {rank}, step {k}: objective evaluation failed: {exc}") from exc

        g = reduce_mean(g_local)
        train_loss = float(h.all_reduce(np.array([loss_local]), "mean")[0])
        collectives = 2
        gsq = l2_norm_squared(g)

        statistic = None
        next_plan = plan
        if (cfg.schedule_mode == "adaptive" and (k - 1) % cfg.norm_test.test_interval == 0
                and plan.global_ < cfg.norm_test.max_global_batch):
            dev = g_local - g
            var_hat = reduce_mean(dev * dev)
            collectives += 1
            outcome = norm_test_from_variance(l1_norm(var_hat), gsq, plan, cfg.norm_test)
            if not outcome.skipped:
                statistic = outcome.statistic
            next_plan = outcome.next_plan
            if debug_rng is not None and not outcome.passed:
                _debug_recheck(obj, w, next_plan, cfg, debug_rng, k)

        scale = clip_scale(math.sqrt(gsq), cfg.adam.clip_norm)
        g_step = g * scale if scale != 1.0 else g
        lr = lr_at(schedule, samples + plan.global_)
        state, w_own = optimizer_step(state, w_own, g_step[mine], cfg.adam, lr)
        if sharded:
            w = h.all_gather(w_own, layout)
            collectives += 1
        else:
            w = w_own

        samples += plan.global_
        if cfg.clock == "simulated":
            elapsed += cfg.cost_model.step_seconds(plan, collectives)
        else:
            elapsed = time.perf_counter() - t0
        if rank == 0:
            val = None
            if k % cfg.val_interval == 0 or samples >= cfg.sample_budget:
                val = evaluate(obj, w, holdout)
            metrics.records.append(StepRecord(
                k, samples, plan.global_, lr, train_loss, math.sqrt(gsq), statistic, val, elapsed))
        plan = next_plan
        k += 1
    return metrics if rank == 0 else None


def _debug_recheck(obj, w, plan: BatchPlan, cfg: TrainConfig, rng, k: int) -> None:
    """Re-run the test at the current iterate with a fresh batch of the new size."""
    plan = clamp_plan_to_population(plan, obj.n)
    batch = sample_batch(rng, obj.n, plan.global_)
    grads = [accumulate_minibatch_grad(obj, w, mb) for mb in split_batch(batch, plan.workers, plan.accumulation_steps)]
    g = np.mean(grads, axis=0)
    out = ddp_norm_test(grads, g, plan, cfg.norm_test)
    log.debug("step %d: re-check at b=%d gives T=%.4g (passed=%s)", k, plan.global_, out.statistic, out.passed)


def run_training(cfg: TrainConfig, objective: Objective | None = None, holdout: Dataset | None = None) -> RunMetrics:
    """Train until ``sample_budget`` samples are processed; return rank-0 metrics."""
    if objective is None:
        objective, built_holdout = cfg.objective.build(cfg.seed)
        holdout = built_holdout if holdout is None else holdout
    if holdout is None:
        holdout = make_holdout(objective.dataset, cfg.objective.holdout)
    w0 = objective.init_params(RngStream(cfg.seed, INIT_STREAM).generator())
    results = spawn_group(
        cfg.workers,
        lambda rank, h: _worker_loop(rank, h, cfg, objective, holdout, w0),
        scheduler=cfg.scheduler,
    )
    return results[0]


# -- exact-variance reference loop ----------------------------------------------

@dataclass
class ExactRunTrace:
    grad_norms: list[float] = field(default_factory=list)
    batch_sizes: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def run_exact_variance_adam(obj: Objective, steps: int, adam: AdamConfig, eta: float, seed: int = 0,
                            coordinatewise: bool = False, w0: ParamVector | None = None) -> ExactRunTrace:
    """Single-process Adam where each batch size satisfies the exact-variance test.

    At every iterate all per-sample gradients are formed, the smallest ``b``
    meeting the exact-variance norm test is chosen, and a batch of that size
    is drawn. Records ``||grad L(w_k)||`` at every step.
    """
    if w0 is None:
        w0 = obj.init_params(RngStream(seed, INIT_STREAM).generator())
    rng = RngStream(seed, SAMPLING_STREAM).generator()
    w = w0.copy()
    state = OptimState.for_config(obj.dim, adam)
    trace = ExactRunTrace()
    for _ in range(steps):
        G = obj.per_sample_grads(w)
        full = G.mean(axis=0)
        b = minimal_exact_batch(G, eta, coordinatewise=coordinatewise)
        batch = sample_batch(rng, obj.n, b)
        g = G[batch].mean(axis=0)
        trace.grad_norms.append(float(np.linalg.norm(full)))
        trace.batch_sizes.append(b)
        trace.losses.append(obj.loss(w))
        if adam.clip_norm is not None:
            g = g * clip_scale(float(np.linalg.norm(g)), adam.clip_norm)
        state, w = optimizer_step(state, w, g, adam, adam.alpha)
    return trace
