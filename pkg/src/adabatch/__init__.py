"""Adaptive batch-size schedules for simulated data-parallel training.

Modules
-------
tensor_core        float64 vector helpers and seeded random streams
collectives        in-process worker group with all-reduce / reduce-scatter / all-gather
objectives         synthetic finite-sum problems with analytic per-sample gradients
batch_controller   norm tests, worker-variance estimator, batch-plan rounding
optim              Adam (analysis form), AdamW, lr schedule, clipping, convergence condition
trainer            the distributed training loop
harness            experiment configs, metrics files, summary tables
"""
from .batch_controller import (
    BatchPlan,
    NormTestConfig,
    TestOutcome,
    approx_norm_test,
    ddp_norm_test,
    ddp_variance_estimator,
    esg_check,
    exact_variance_expectation,
    per_sample_variance_l1,
    round_batch_plan,
)
from .collectives import CollectiveError, GradReport, ParamShard, make_even_shards, spawn_group
from .objectives import Dataset, Objective, make_dataset, sample_batch
from .optim import AdamConfig, LrSchedule, OptimState, adam_step_theory, adamw_step, clip_gradient, lr_at
from .optim import theorem_condition, theorem_constant_c1
from .trainer import ObjectiveSpec, RunMetrics, TrainConfig, run_training
from .harness import parse_config, run_experiment

__version__ = "0.1.0"
