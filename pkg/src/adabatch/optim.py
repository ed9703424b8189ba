"""Adam in its analysis form, AdamW with bias correction, schedules, clipping,
and the hyperparameter condition of the Adam convergence result."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ParamVector


@dataclass(frozen=True)
class AdamConfig:
    """Optimizer hyperparameters.

    ``form="theory"`` is the plain recursion without bias correction, epsilon
    or weight decay; ``form="adamw"`` is the bias-corrected update with
    decoupled weight decay. ``clip_norm=None`` disables clipping.
    """

    alpha: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float | None = 1.0
    form: str = "adamw"
    v0: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.eps < 0 or self.weight_decay < 0:
            raise ValueError("eps and weight_decay must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0 or None")
        if self.form not in ("theory", "adamw"):
            raise ValueError(f"unknown optimizer form {self.form!r}")
        if self.form == "theory":
            if self.eps != 0 or self.weight_decay != 0:
                raise ValueError("theory-form Adam uses eps = 0 and weight_decay = 0")
            if self.v0 <= 0:
                raise ValueError("theory-form Adam needs v0 > 0")
        elif self.eps <= 0:
            raise ValueError("AdamW needs eps > 0")


@dataclass(frozen=True)
class OptimState:
    m: ParamVector
    v: ParamVector
    k: int = 1

    @classmethod
    def zeros(cls, d: int) -> "OptimState":
        return cls(np.zeros(d), np.zeros(d), 1)

    @classmethod
    def for_config(cls, d: int, cfg: AdamConfig) -> "OptimState":
        if cfg.form == "theory":
            return cls(np.zeros(d), np.full(d, cfg.v0), 1)
        return cls.zeros(d)

    def shard(self, sl: slice) -> "OptimState":
        return OptimState(self.m[sl].copy(), self.v[sl].copy(), self.k)


def adam_step_theory(state: OptimState, w: ParamVector, g: ParamVector, cfg: AdamConfig):
    """``m = b1 m + (1-b1) g``, ``v = b2 v + (1-b2) g^2``, ``w -= alpha m / sqrt(v)``."""
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    zero = np.flatnonzero(v == 0.0)
    if zero.size:
        raise ZeroDivisionError(f"second moment is zero at coordinate(s) {zero.tolist()}")
    w_new = w - cfg.alpha * m / np.sqrt(v)
    return OptimState(m, v, state.k + 1), w_new


def adamw_step(state: OptimState, w: ParamVector, g: ParamVector, cfg: AdamConfig, lr: float | None = None):
    """Bias-corrected AdamW step; ``lr`` (default ``cfg.alpha``) replaces alpha."""
    lr = cfg.alpha if lr is None else lr
    k = state.k
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** k)
    v_hat = v / (1.0 - cfg.beta2 ** k)
    w_new = (1.0 - lr * cfg.weight_decay) * w - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return OptimState(m, v, k + 1), w_new


def optimizer_step(state: OptimState, w, g, cfg: AdamConfig, lr: float | None = None):
    if cfg.form == "theory":
        return adam_step_theory(state, w, g, cfg)
    return adamw_step(state, w, g, cfg, lr)


def clip_scale(grad_norm: float, max_norm: float | None) -> float:
    if max_norm is None or grad_norm <= max_norm:
        return 1.0
    return max_norm / grad_norm


def clip_gradient(g: ParamVector, max_norm: float) -> ParamVector:
    """Rescale ``g`` onto the ball of radius ``max_norm`` if it lies outside."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    scale = clip_scale(float(np.linalg.norm(g)), max_norm)
    return g if scale == 1.0 else g * scale


@dataclass(frozen=True)
class LrSchedule:
    peak: float = 4e-4
    min: float = 4e-5
    warmup_samples: int = 20000
    total_samples: int = 2000000

    def __post_init__(self):
        if not 0 < self.min <= self.peak:
            raise ValueError("need 0 < min <= peak")
        if not 0 <= self.warmup_samples <= self.total_samples:
            raise ValueError("need 0 <= warmup_samples <= total_samples")


def lr_at(schedule: LrSchedule, samples_processed: float) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay to ``min``."""
    s = samples_processed
    if s < 0:
        raise ValueError("samples_processed must be >= 0")
    if s < schedule.warmup_samples:
        return schedule.peak * s / schedule.warmup_samples
    if s >= schedule.total_samples:
        return schedule.min
    t = (s - schedule.warmup_samples) / (schedule.total_samples - schedule.warmup_samples)
    return schedule.min + (schedule.peak - schedule.min) * 0.5 * (1.0 + math.cos(math.pi * t))


# -- convergence-condition helpers ---------------------------------------------

def beta1_threshold(beta2: float, eta: float) -> float:
    return math.sqrt(beta2) - 8.0 * (1.0 + eta * eta) * (1.0 - beta2) / beta2 ** 2


def theorem_condition(beta1: float, beta2: float, eta: float) -> tuple[bool, float]:
    """Return ``(admissible, threshold)`` with admissible iff ``0 < beta1 <= threshold``."""
    if not 0.0 < beta2 < 1.0:
        raise ValueError("beta2 must lie in (0, 1)")
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    thr = beta1_threshold(beta2, eta)
    return (0.0 < beta1 <= thr), thr


def theorem_constant_c1(alpha: float, beta1: float, beta2: float, eta: float, L: float, sigma: float, d: int) -> float:
    """Three-term constant ``c1`` of the formal Adam bound.

    ``eta`` enters the bound only through ``tau^2 = 1 + eta^2``, which does
    not appear in ``c1`` itself; it is accepted for a uniform signature.
    """
    if L <= 0 or sigma <= 0:
        raise ValueError("L and sigma must be > 0")
    rb = math.sqrt(beta2)
    if beta1 >= rb:
        raise ValueError("c1 requires beta1 < sqrt(beta2)")
    q = 1.0 - beta1 / rb
    term1 = 32.0 * L * alpha * (1.0 + beta1 / rb) ** 3 / ((1.0 - beta2) * q ** 3)
    term2 = 16.0 * beta1 ** 2 * sigma * (1.0 - beta1) / (beta2 * math.sqrt(1.0 - beta2) * q ** 3)
    term3 = 64.0 * (1.0 + sigma ** 2) * sigma ** 2 * L ** 2 * alpha ** 2 * d / (
        beta2 ** 2 * q ** 4 * sigma * (1.0 - beta2) ** 1.5
    )
    return term1 + term2 + term3
