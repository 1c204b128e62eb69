import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nerfbridge.errors import DimensionMismatch, OutOfRange
from nerfbridge.optim import OneCycleSchedule, adamw_step, init_adamw, one_cycle_lr
from nerfbridge.tensor import MlpParams


def scalar_params(theta, dtype=np.float64):
    return MlpParams([1, 1], [np.array([[theta]], dtype=dtype)], [np.array([0.0], dtype=dtype)])


def test_single_step_hand_oracle():
    # t=1: m_hat = g, v_hat = g^2, so the adaptive step is lr * g / (|g| + eps).
    adaptive = 1e-3 * 0.5 / (0.5 + 1e-8)
    decay = 1e-3 * 1e-2 * 1.0
    assert adaptive == pytest.approx(9.9999998e-4, abs=1e-12)
    assert decay == pytest.approx(1e-5, abs=1e-18)
    p, g = scalar_params(1.0), scalar_params(0.5)
    new, state = adamw_step(p, g, init_adamw(p), lr=1e-3, weight_decay=1e-2)
    assert new.weights[0][0, 0] == pytest.approx(1.0 - adaptive - decay, abs=1e-12)
    assert new.weights[0][0, 0] == pytest.approx(0.99899000002, abs=1e-12)
    assert state.step_count == 1


def test_zero_grad_no_decay_leaves_params():
    rng = np.random.default_rng(0)
    p = MlpParams([3, 2], [rng.normal(size=(2, 3))], [rng.normal(size=2)])
    new, state = adamw_step(p, p.zeros_like(), init_adamw(p), 1e-3, 0.0)
    for a, b in zip(p.arrays(), new.arrays()):
        np.testing.assert_array_equal(a, b)
    assert state.step_count == 1


def test_zero_grad_decay_only_step_is_exact():
    rng = np.random.default_rng(1)
    p = MlpParams([3, 2], [rng.normal(size=(2, 3))], [rng.normal(size=2)])
    lr, wd = 3e-3, 0.05
    new, _ = adamw_step(p, p.zeros_like(), init_adamw(p), lr, wd)
    for a, b in zip(p.arrays(), new.arrays()):
        np.testing.assert_array_equal(b, a * (1 - lr * wd))


def test_init_state_zeroed_and_reproducible():
    rng = np.random.default_rng(2)
    p = MlpParams([3, 4, 2], [rng.normal(size=(4, 3)), rng.normal(size=(2, 4))],
                  [rng.normal(size=4), rng.normal(size=2)])
    a, b = init_adamw(p), init_adamw(p)
    assert a.step_count == 0
    for m, v, m2 in zip(a.m, a.v, b.m):
        assert not m.any() and not v.any()
        np.testing.assert_array_equal(m, m2)


def test_step_is_bit_deterministic_and_pure():
    rng = np.random.default_rng(3)
    p = MlpParams([5, 3], [rng.normal(size=(3, 5)).astype(np.float32)],
                  [rng.normal(size=3).astype(np.float32)])
    g = MlpParams([5, 3], [rng.normal(size=(3, 5))], [rng.normal(size=3)])
    before = [a.copy() for a in p.arrays()]
    s = init_adamw(p)
    a, _ = adamw_step(p, g, s, 1e-2, 1e-2)
    b, _ = adamw_step(p, g, s, 1e-2, 1e-2)
    for x, y, z in zip(a.arrays(), b.arrays(), before):
        assert x.dtype == np.float32
        assert x.tobytes() == y.tobytes()
    for x, z in zip(p.arrays(), before):
        np.testing.assert_array_equal(x, z)
    assert s.step_count == 0


def test_shape_mismatch():
    p = scalar_params(1.0)
    g = MlpParams([2, 1], [np.zeros((1, 2))], [np.zeros(1)])
    with pytest.raises(DimensionMismatch):
        adamw_step(p, g, init_adamw(p), 1e-3, 0.0)


def test_constant_gradient_update_approaches_lr():
    lr = 1e-3
    p, g = scalar_params(0.0), scalar_params(0.7)
    state = init_adamw(p)
    for _ in range(1000):
        prev = p.weights[0][0, 0]
        p, state = adamw_step(p, g, state, lr, 0.0)
    update = abs(p.weights[0][0, 0] - prev)
    assert 0.9 * lr <= update <= lr
    assert state.step_count == 1000


@given(st.floats(-100, 100), st.floats(1e-6, 0.5), st.floats(0, 1.0))
def test_decay_never_flips_sign(theta, lr, wd):
    p = scalar_params(theta)
    new, _ = adamw_step(p, p.zeros_like(), init_adamw(p), lr, wd)
    assert lr * wd < 1
    assert np.sign(new.weights[0][0, 0]) in (np.sign(theta), 0.0)


schedules = st.builds(
    OneCycleSchedule,
    max_lr=st.floats(1e-6, 1.0),
    total_steps=st.integers(10, 5000),
    pct_start=st.floats(0.25, 0.75),
    div_factor=st.floats(1.5, 100),
    final_div_factor=st.floats(1.5, 1e5),
)


@given(schedules)
def test_one_cycle_endpoints(s):
    assert one_cycle_lr(s, 0) == pytest.approx(s.max_lr / s.div_factor, abs=1e-9)
    peak = round(s.pct_start * s.total_steps)
    assert s.peak_step == peak
    assert one_cycle_lr(s, peak) == pytest.approx(s.max_lr, abs=1e-9)
    assert one_cycle_lr(s, s.total_steps - 1) == pytest.approx(s.max_lr / s.final_div_factor, abs=1e-9)


# Each phase must span a quarter of the run for the 2*pi*max_lr/T bound to hold.
continuity_schedules = st.builds(
    OneCycleSchedule,
    max_lr=st.floats(1e-6, 1.0),
    total_steps=st.integers(20, 5000),
    pct_start=st.floats(0.25, 0.7),
    div_factor=st.floats(1.5, 100),
    final_div_factor=st.floats(1.5, 1e5),
)


@given(continuity_schedules)
def test_one_cycle_continuity(s):
    lrs = [one_cycle_lr(s, i) for i in range(s.total_steps)]
    bound = 2 * s.max_lr / s.total_steps * math.pi
    assert max(abs(b - a) for a, b in zip(lrs, lrs[1:])) <= bound


def test_one_cycle_shape():
    s = OneCycleSchedule(1e-3, 100)
    lrs = [one_cycle_lr(s, i) for i in range(100)]
    peak = s.peak_step
    assert all(a <= b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1:]))


def test_one_cycle_out_of_range():
    s = OneCycleSchedule(1e-3, 10)
    with pytest.raises(OutOfRange):
        one_cycle_lr(s, 10)
    with pytest.raises(OutOfRange):
        one_cycle_lr(s, -1)


@pytest.mark.parametrize("total", [1, 2, 3])
def test_one_cycle_tiny_runs_are_defined(total):
    s = OneCycleSchedule(1e-3, total)
    lrs = [one_cycle_lr(s, i) for i in range(total)]
    assert lrs[0] == pytest.approx(1e-3 / 25)
    assert all(0 < x <= 1e-3 for x in lrs)


def test_schedule_validation():
    with pytest.raises(ValueError):
        OneCycleSchedule(1e-3, 0)
    with pytest.raises(ValueError):
        OneCycleSchedule(1e-3, 10, pct_start=1.0)
    with pytest.raises(ValueError):
        OneCycleSchedule(1e-3, 10, div_factor=1.0)
