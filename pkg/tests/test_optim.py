import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adabatch.optim import (
    AdamConfig,
    LrSchedule,
    OptimState,
    adam_step_theory,
    adamw_step,
    clip_gradient,
    lr_at,
    optimizer_step,
    theorem_condition,
    theorem_constant_c1,
)


def theory(alpha=0.1, beta1=0.9, beta2=0.95, v0=1.0):
    return AdamConfig(alpha=alpha, beta1=beta1, beta2=beta2, eps=0.0, weight_decay=0.0,
                      clip_norm=None, form="theory", v0=v0)


def test_theory_step_degenerate_betas_is_sign_sgd():
    cfg = theory(alpha=0.3, beta1=0.0, beta2=0.0, v0=5.0)
    state = OptimState.for_config(2, cfg)
    _, w = adam_step_theory(state, np.array([1.0, 1.0]), np.array([2.0, -0.5]), cfg)
    np.testing.assert_allclose(w, [0.7, 1.3], rtol=0, atol=1e-15)


def test_theory_step_zero_gradient_keeps_w():
    cfg = theory()
    state = OptimState.for_config(1, cfg)
    new, w = adam_step_theory(state, np.array([3.0]), np.array([0.0]), cfg)
    assert w[0] == 3.0
    assert new.v[0] == pytest.approx(0.95)
    assert new.m[0] == 0.0 and new.k == 2


def test_theory_step_hand_recursion():
    cfg = theory(alpha=0.1)
    new, w = adam_step_theory(OptimState(np.zeros(1), np.ones(1)), np.zeros(1), np.ones(1), cfg)
    assert new.m[0] == pytest.approx(0.1)
    assert new.v[0] == pytest.approx(1.0)
    assert w[0] == pytest.approx(-0.01, rel=1e-12)


def test_theory_step_zero_second_moment_raises():
    cfg = theory(beta2=0.0)
    with pytest.raises(ZeroDivisionError, match=r"\[1\]"):
        adam_step_theory(OptimState(np.zeros(2), np.ones(2)), np.zeros(2), np.array([1.0, 0.0]), cfg)


def test_theory_config_contract():
    with pytest.raises(ValueError):
        AdamConfig(form="theory")  # eps and weight decay default to nonzero
    with pytest.raises(ValueError):
        AdamConfig(eps=0.0, weight_decay=0.0, form="theory", v0=0.0)
    with pytest.raises(ValueError):
        AdamConfig(eps=0.0)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)


def test_adamw_first_step_identity(rng):
    g = rng.standard_normal(5)
    cfg = AdamConfig(beta1=0.7, beta2=0.3, eps=1e-300, weight_decay=0.0)
    new, w = adamw_step(OptimState.zeros(5), np.zeros(5), g, cfg, lr=1.0)
    m_hat = new.m / (1 - 0.7)
    v_hat = new.v / (1 - 0.3)
    np.testing.assert_allclose(m_hat, g, rtol=1e-14)
    np.testing.assert_allclose(v_hat, g * g, rtol=1e-14)
    np.testing.assert_allclose(w, -np.sign(g), rtol=1e-12)


def test_adamw_zero_gradient_without_decay():
    cfg = AdamConfig(weight_decay=0.0)
    state = OptimState(np.array([1.0]), np.array([4.0]), 3)
    new, w = adamw_step(state, np.array([2.0]), np.zeros(1), cfg, lr=0.01)
    assert new.m[0] == pytest.approx(0.9) and new.v[0] == pytest.approx(3.8)
    assert w[0] != 2.0  # momentum still moves w
    new, w = adamw_step(OptimState.zeros(1), np.array([2.0]), np.zeros(1), cfg, lr=0.01)
    assert w[0] == 2.0


def test_adamw_decay_only_step():
    cfg = AdamConfig(weight_decay=0.1)
    _, w = adamw_step(OptimState.zeros(1), np.array([1.0]), np.zeros(1), cfg, lr=0.0004)
    assert w[0] == pytest.approx(0.99996, rel=1e-15)


def test_adamw_limit_matches_theory_form(rng):
    # large k makes the bias corrections 1 to machine precision
    d = 6
    m0 = rng.standard_normal(d)
    v0 = rng.uniform(0.5, 2.0, d)
    g = rng.standard_normal(d)
    w0 = rng.standard_normal(d)
    t_cfg = theory(alpha=0.01)
    a_cfg = AdamConfig(alpha=0.01, eps=1e-30, weight_decay=0.0)
    _, w_t = adam_step_theory(OptimState(m0, v0), w0, g, t_cfg)
    _, w_a = adamw_step(OptimState(m0, v0, 100_000), w0, g, a_cfg)
    np.testing.assert_allclose(w_a, w_t, rtol=1e-9)


def test_optimizer_step_dispatch():
    cfg = theory()
    s = OptimState.for_config(1, cfg)
    assert np.array_equal(optimizer_step(s, np.zeros(1), np.ones(1), cfg)[1],
                          adam_step_theory(s, np.zeros(1), np.ones(1), cfg)[1])


def test_second_moment_stays_within_history_bounds(rng):
    cfg = theory(alpha=1e-3)
    gs = rng.uniform(0.5, 2.0, (200, 3)) * rng.choice([-1, 1], (200, 3))
    lo, hi = (gs ** 2).min(axis=0), (gs ** 2).max(axis=0)
    state = OptimState(np.zeros(3), (lo + hi) / 2)
    w = np.zeros(3)
    for g in gs:
        state, w = adam_step_theory(state, w, g, cfg)
        assert np.all(state.v >= lo * (1 - 1e-12)) and np.all(state.v <= hi * (1 + 1e-12))


@pytest.mark.parametrize("g, max_norm, expected", [
    ([0.3, 0.4], 1.0, [0.3, 0.4]),
    ([3.0, 4.0], 1.0, [0.6, 0.8]),
    ([3.0, 4.0], 5.0, [3.0, 4.0]),
])
def test_clip_examples(g, max_norm, expected):
    np.testing.assert_allclose(clip_gradient(np.array(g), max_norm), expected, rtol=1e-15)


def test_clip_rejects_nonpositive():
    with pytest.raises(ValueError):
        clip_gradient(np.ones(2), 0.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_clip_never_increases_norm_and_keeps_direction(vals, max_norm):
    g = np.array(vals)
    c = clip_gradient(g, max_norm)
    n, nc = np.linalg.norm(g), np.linalg.norm(c)
    assert nc <= max(n, 0) * (1 + 1e-12)
    assert nc <= max_norm * (1 + 1e-12) or nc == n
    if n > 0:
        np.testing.assert_allclose(c / nc, g / n, rtol=1e-12, atol=1e-15)


def test_lr_schedule_examples():
    s = LrSchedule()
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 10_000) == pytest.approx(2e-4)
    assert lr_at(s, 20_000) == pytest.approx(4e-4)
    assert lr_at(s, 2_000_000) == pytest.approx(4e-5)
    assert lr_at(s, 5_000_000) == pytest.approx(4e-5)
    with pytest.raises(ValueError):
        lr_at(s, -1)


def test_lr_schedule_continuous_and_non_increasing_after_warmup():
    s = LrSchedule()
    assert lr_at(s, 20_000 - 1e-6) == pytest.approx(lr_at(s, 20_000), rel=1e-9)
    vals = [lr_at(s, x) for x in np.linspace(20_000, 2_100_000, 2001)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    warm = [lr_at(s, x) for x in np.linspace(0, 20_000, 101)]
    assert all(a <= b for a, b in zip(warm, warm[1:]))


def test_lr_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(peak=1e-4, min=1e-3)
    with pytest.raises(ValueError):
        LrSchedule(warmup_samples=10, total_samples=5)


def test_theorem_condition_examples():
    adm, thr = theorem_condition(0.5, 0.95, 0.1)
    assert adm
    assert thr == pytest.approx(0.52704, abs=1e-4)
    assert thr == pytest.approx(math.sqrt(0.95) - 8 * 1.01 * 0.05 / 0.95 ** 2, rel=1e-15)
    assert not theorem_condition(0.9, 0.95, 0.1)[0]
    assert not theorem_condition(0.0, 0.95, 0.1)[0]


def test_theorem_threshold_tends_to_one():
    thr = [theorem_condition(0.5, b2, 0.5)[1] for b2 in (0.99, 0.999, 0.99999)]
    assert thr[0] < thr[1] < thr[2] < 1.0
    assert thr[-1] == pytest.approx(1.0, abs=1e-3)
    assert theorem_condition(0.99, 0.9999999, 0.5)[0]


def test_theorem_condition_ranges():
    for args in ((0.5, 1.0, 0.1), (0.5, 0.95, 1.0), (0.5, 0.95, 0.0)):
        with pytest.raises(ValueError):
            theorem_condition(*args)


def _c1_mp(alpha, b1, b2, L, s, d):
    mpmath.mp.dps = 50
    alpha, b1, b2, L, s = (mpmath.mpf(x) for x in (alpha, b1, b2, L, s))
    r = b1 / mpmath.sqrt(b2)
    t1 = 32 * L * alpha * (1 + r) ** 3 / ((1 - b2) * (1 - r) ** 3)
    t2 = 16 * b1 ** 2 * s * (1 - b1) / (b2 * mpmath.sqrt(1 - b2) * (1 - r) ** 3)
    t3 = 64 * (1 + s ** 2) * s ** 2 * L ** 2 * alpha ** 2 * d / (b2 ** 2 * (1 - r) ** 4 * s * (1 - b2) ** mpmath.mpf(1.5))
    return t1, t2, t3


def test_c1_matches_high_precision_evaluation():
    ref = float(sum(_c1_mp("0.001", "0.5", "0.95", 1, 1, 10)))
    got = theorem_constant_c1(0.001, 0.5, 0.95, 0.1, 1.0, 1.0, 10)
    assert got == pytest.approx(ref, rel=1e-12)
    for args in ((0.01, 0.3, 0.99, 2.0, 0.5, 100), (1e-4, 0.7, 0.999, 10.0, 3.0, 7)):
        ref = float(sum(_c1_mp(*args)))
        assert theorem_constant_c1(args[0], args[1], args[2], 0.2, *args[3:]) == pytest.approx(ref, rel=1e-12)


def test_c1_with_zero_beta1():
    alpha, b2, L, s, d = 0.002, 0.9, 3.0, 1.5, 4
    t3 = 64 * (1 + s ** 2) * s ** 2 * L ** 2 * alpha ** 2 * d / (b2 ** 2 * s * (1 - b2) ** 1.5)
    got = theorem_constant_c1(alpha, 0.0, b2, 0.1, L, s, d)
    assert got == pytest.approx(32 * L * alpha / (1 - b2) + t3, rel=1e-14)


def test_c1_alpha_homogeneity():
    args = (0.5, 0.95, 0.1, 1.0, 1.0, 10)
    t1, t2, t3 = (float(t) for t in _c1_mp(0.001, 0.5, 0.95, 1, 1, 10))
    c_a = theorem_constant_c1(0.001, *args)
    c_2a = theorem_constant_c1(0.002, *args)
    assert c_2a - c_a == pytest.approx(t1 + 3 * t3, rel=1e-10)


def test_c1_domain_errors():
    with pytest.raises(ValueError):
        theorem_constant_c1(0.001, 0.98, 0.95, 0.1, 1.0, 1.0, 10)
    with pytest.raises(ValueError):
        theorem_constant_c1(0.001, 0.5, 0.95, 0.1, 0.0, 1.0, 10)
